//! Deterministic synthetic scenes with class co-occurrence structure.
//!
//! Foreground classes are partitioned into pools; every image draws all of
//! its objects from a single pool. Classes at the same position in different
//! pools share a base colour, so a pixel's appearance alone cannot tell them
//! apart. What does tell them apart is context: the background tint differs
//! per pool, and pools have different members.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gt::LabelMask;
use crate::model::ModelConfig;
use crate::netpbm::{self, RgbImage};
use crate::tensor::{Element, Shape, Tensor};

const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "dmlseg-corpus-1";

/// Base colours by position inside a pool.
const PALETTE: [[f64; 3]; 6] = [
    [0.80, 0.30, 0.25],
    [0.30, 0.70, 0.35],
    [0.30, 0.35, 0.80],
    [0.80, 0.75, 0.30],
    [0.70, 0.35, 0.75],
    [0.30, 0.75, 0.75],
];

/// Background colour per pool.
const BACKGROUND: [[f64; 3]; 4] = [
    [0.47, 0.47, 0.55],
    [0.55, 0.47, 0.47],
    [0.47, 0.55, 0.47],
    [0.55, 0.55, 0.45],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Disjoint cover of `1..K`; class 0 is background in every image.
    pub pools: Vec<Vec<u8>>,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Range of object sizes (bounding-box side) in pixels.
    pub size_min: usize,
    pub size_max: usize,
    /// Half-width of the uniform per-instance colour jitter.
    pub jitter: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 7,
            height: 96,
            width: 96,
            num_classes: 8,
            pools: vec![vec![1, 2, 3], vec![4, 5, 6, 7]],
            shapes_min: 2,
            shapes_max: 4,
            size_min: 20,
            size_max: 44,
            jitter: 0.06,
            noise: 0.08,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.height == 0 || self.width == 0 {
            return fail("scene size must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return fail(format!(
                "scene classes must be in 2..=255, got {}",
                self.num_classes
            ));
        }
        if self.pools.is_empty() || self.pools.len() > BACKGROUND.len() {
            return fail(format!(
                "need 1..={} pools, got {}",
                BACKGROUND.len(),
                self.pools.len()
            ));
        }
        let mut seen = vec![false; self.num_classes];
        for pool in &self.pools {
            if pool.is_empty() {
                return fail("pools must not be empty".into());
            }
            if pool.len() > PALETTE.len() {
                return fail(format!("pools may hold at most {} classes", PALETTE.len()));
            }
            for &c in pool {
                let c = c as usize;
                if c == 0 || c >= self.num_classes || seen[c] {
                    return fail(format!(
                        "pools must partition 1..{}; class {c} is invalid or repeated",
                        self.num_classes
                    ));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = (1..self.num_classes).find(|&c| !seen[c]) {
            return fail(format!("class {c} belongs to no pool"));
        }
        if self.shapes_min > self.shapes_max {
            return fail("shapes_min exceeds shapes_max".into());
        }
        if self.size_min < 2 || self.size_min > self.size_max {
            return fail(format!(
                "bad size range {}..{}",
                self.size_min, self.size_max
            ));
        }
        if !(self.jitter >= 0.0 && self.noise >= 0.0) {
            return fail("jitter and noise must be non-negative".into());
        }
        Ok(())
    }

    /// Two-pool scenes sized for `config`'s input and class count.
    pub fn for_model(config: &ModelConfig, seed: u64) -> Result<Self> {
        let k = config.num_classes;
        let fg: Vec<u8> = (1..k as u8).collect();
        let pools = if fg.len() >= 2 {
            let (a, b) = fg.split_at(fg.len() / 2);
            vec![a.to_vec(), b.to_vec()]
        } else {
            vec![fg]
        };
        let (h, w) = config.input_size;
        let side = h.min(w);
        let size_min = (side / 5).max(3);
        let spec = SceneSpec {
            seed,
            height: h,
            width: w,
            num_classes: k,
            pools,
            size_min,
            size_max: (side * 11 / 24).max(size_min),
            ..SceneSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pool_of(&self, index: u64) -> usize {
        (index % self.pools.len() as u64) as usize
    }

    pub fn base_color(&self, class: u8) -> [f64; 3] {
        self.pools
            .iter()
            .find_map(|p| p.iter().position(|&c| c == class))
            .map(|i| PALETTE[i])
            .unwrap_or([0.5, 0.5, 0.5])
    }

    pub fn background_color(&self, pool: usize) -> [f64; 3] {
        BACKGROUND[pool]
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let pools = self
            .pools
            .iter()
            .map(|p| {
                p.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("seed".into(), self.seed.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("classes".into(), self.num_classes.to_string()),
            ("pools".into(), pools),
            ("shapes_min".into(), self.shapes_min.to_string()),
            ("shapes_max".into(), self.shapes_max.to_string()),
            ("size_min".into(), self.size_min.to_string()),
            ("size_max".into(), self.size_max.to_string()),
            ("jitter".into(), self.jitter.to_string()),
            ("noise".into(), self.noise.to_string()),
        ]
    }

    /// Reads scene keys from `kv`, keeping defaults for absent ones.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: FromStr>(kv: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
            if let Some(v) = kv.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))?;
            }
            Ok(())
        }
        num(kv, "seed", &mut self.seed)?;
        num(kv, "height", &mut self.height)?;
        num(kv, "width", &mut self.width)?;
        num(kv, "classes", &mut self.num_classes)?;
        num(kv, "shapes_min", &mut self.shapes_min)?;
        num(kv, "shapes_max", &mut self.shapes_max)?;
        num(kv, "size_min", &mut self.size_min)?;
        num(kv, "size_max", &mut self.size_max)?;
        num(kv, "jitter", &mut self.jitter)?;
        num(kv, "noise", &mut self.noise)?;
        if let Some(v) = kv.get("pools") {
            self.pools = v
                .split(';')
                .map(|pool| {
                    pool.split(',')
                        .map(|c| {
                            c.trim()
                                .parse::<u8>()
                                .map_err(|_| Error::config(format!("bad class `{c}` in pools")))
                        })
                        .collect::<Result<Vec<u8>>>()
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

/// One generated image and its exact label mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub image: RgbImage,
    pub mask: LabelMask,
    pub pool: usize,
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Scene `index` of `spec`; a pure function of `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let pool = spec.pool_of(index);
    let classes = &spec.pools[pool];
    let (h, w) = (spec.height, spec.width);

    let mut mask = LabelMask::filled(h, w, 0);
    let mut color = vec![spec.background_color(pool); h * w];

    let count = rng.random_range(spec.shapes_min..=spec.shapes_max);
    for _ in 0..count {
        let class = classes[rng.random_range(0..classes.len())];
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Triangle,
        };
        let base = spec.base_color(class);
        let mut c = [0.0; 3];
        for (ch, b) in c.iter_mut().zip(base) {
            *ch = b + rng.random_range(-1.0..=1.0) * spec.jitter;
        }
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let size = rng.random_range(spec.size_min as f64..=spec.size_max as f64);
        let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
            ShapeKind::Rectangle => {
                let aspect = rng.random_range(0.6..=1.0);
                let (hh, hw) = if rng.random_bool(0.5) {
                    (size / 2.0, size * aspect / 2.0)
                } else {
                    (size * aspect / 2.0, size / 2.0)
                };
                Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
            }
            ShapeKind::Disk => {
                let r2 = (size / 2.0) * (size / 2.0);
                Box::new(move |y, x| (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r2)
            }
            ShapeKind::Triangle => {
                let half = size / 2.0;
                let mut pts = [(0.0, 0.0); 3];
                for _ in 0..16 {
                    for p in pts.iter_mut() {
                        *p = (
                            cx + rng.random_range(-half..=half),
                            cy + rng.random_range(-half..=half),
                        );
                    }
                    if edge(pts[0], pts[1], pts[2]).abs() >= size * size / 4.0 {
                        break;
                    }
                }
                let [a, b, c] = pts;
                Box::new(move |y, x| {
                    let p = (x, y);
                    let (d0, d1, d2) = (edge(a, b, p), edge(b, c, p), edge(c, a, p));
                    (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
                })
            }
        };
        for y in 0..h {
            for x in 0..w {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    mask.set(y, x, class);
                    color[y * w + x] = c;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut image = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0u8; 3];
            for (ch, &v) in rgb.iter_mut().zip(&color[y * w + x]) {
                let n = if spec.noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                *ch = ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            image.set(y, x, rgb);
        }
    }
    Ok(Scene { image, mask, pool })
}

/// Stacks RGB images into `(N, 3, H, W)` with values in `[0, 1]`.
pub fn image_tensor<T: Element>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::config("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let shape = Shape::new(images.len(), 3, h, w)?;
    let mut t = Tensor::zeros(shape);
    for (n, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::data(format!(
                "image {n} is {}x{}, batch expects {h}x{w}",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = T::from_f64_lossy(img.data[(y * w + x) * 3 + c] as f64 / 255.0);
                    let o = shape.offset(n, c, y, x);
                    t.data_mut()[o] = v;
                }
            }
        }
    }
    Ok(t)
}

/// Errors if some foreground class shows up in fewer than 5% of the images
/// of its pool among the first `n` scenes.
pub fn check_class_balance(spec: &SceneSpec, n: u64) -> Result<()> {
    let mut images_per_pool = vec![0usize; spec.pools.len()];
    let mut hits = vec![0usize; spec.num_classes];
    for i in 0..n {
        let scene = generate_scene(spec, i)?;
        images_per_pool[scene.pool] += 1;
        for c in scene.mask.classes_present(spec.num_classes) {
            hits[c as usize] += 1;
        }
    }
    for (p, pool) in spec.pools.iter().enumerate() {
        for &c in pool {
            let frac = hits[c as usize] as f64 / images_per_pool[p].max(1) as f64;
            if frac < 0.05 {
                return Err(Error::data(format!(
                    "class {c} appears in only {:.1}% of pool {p} images over {n} scenes",
                    frac * 100.0
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config(format!(
                "unknown split `{other}` (train|val)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub split: Split,
    /// Paths relative to the corpus root.
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// An image with its full-resolution label mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub entries: Vec<CorpusEntry>,
    pub content_hash: String,
}

fn content_hash(root: &Path, entries: &[CorpusEntry]) -> Result<String> {
    let mut hasher = Sha256::new();
    for e in entries {
        for rel in [&e.image, &e.mask] {
            let path = root.join(rel);
            if !path.is_file() {
                return Err(Error::data(format!(
                    "file listed in manifest is missing: {}",
                    rel.display()
                )));
            }
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            hasher.update(&bytes);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `n_train + n_val` scenes plus a manifest under `dir`.
///
/// Training scenes use indices `0..n_train`, validation scenes continue from
/// `n_train`.
pub fn write_corpus(spec: &SceneSpec, n_train: usize, n_val: usize, dir: &Path) -> Result<Corpus> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(n_train + n_val);
    for i in 0..n_train + n_val {
        let (split, local) = if i < n_train {
            (Split::Train, i)
        } else {
            (Split::Val, i - n_train)
        };
        let scene = generate_scene(spec, i as u64)?;
        let image = PathBuf::from(format!("images/{split}_{local:05}.ppm"));
        let mask = PathBuf::from(format!("masks/{split}_{local:05}.pgm"));
        netpbm::write_ppm(&dir.join(&image), &scene.image)?;
        netpbm::write_pgm(&dir.join(&mask), spec.height, spec.width, scene.mask.data())?;
        entries.push(CorpusEntry { split, image, mask });
    }
    let hash = content_hash(dir, &entries)?;
    let mut text = format!("format = {FORMAT}\n");
    for (k, v) in spec.to_kv() {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!(
        "n_train = {n_train}\nn_val = {n_val}\ncontent_hash = {hash}\n"
    ));
    for e in &entries {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.split,
            e.image.display(),
            e.mask.display()
        ));
    }
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(Corpus {
        root: dir.to_path_buf(),
        spec: spec.clone(),
        n_train,
        n_val,
        entries,
        content_hash: hash,
    })
}

/// Parses and verifies the manifest under `dir`.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut kv = BTreeMap::new();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if line.contains('\t') {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::data(format!(
                    "manifest line {line_no}: expected split<TAB>image<TAB>mask"
                )));
            }
            let split = fields[0].parse().map_err(|_| {
                Error::data(format!(
                    "manifest line {line_no}: bad split `{}`",
                    fields[0]
                ))
            })?;
            entries.push(CorpusEntry {
                split,
                image: PathBuf::from(fields[1]),
                mask: PathBuf::from(fields[2]),
            });
        } else {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::data(format!("manifest line {line_no}: expected `key = value`"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    if kv.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::data(format!("manifest is not {FORMAT}")));
    }
    let get = |key: &str| -> Result<String> {
        kv.get(key)
            .cloned()
            .ok_or_else(|| Error::data(format!("manifest lacks `{key}`")))
    };
    let parse_count = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::data(format!("manifest `{key}` is not a count")))
    };
    let mut spec = SceneSpec::default();
    spec.apply_kv(&kv)
        .map_err(|e| Error::data(format!("manifest: {e}")))?;
    spec.validate()
        .map_err(|e| Error::data(format!("manifest: {e}")))?;
    let n_train = parse_count("n_train")?;
    let n_val = parse_count("n_val")?;
    let expected = get("content_hash")?;
    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    if count(Split::Train) != n_train || count(Split::Val) != n_val {
        return Err(Error::data(format!(
            "manifest lists {} train / {} val files, header says {n_train} / {n_val}",
            count(Split::Train),
            count(Split::Val)
        )));
    }
    let actual = content_hash(dir, &entries)?;
    if actual != expected {
        return Err(Error::data(format!(
            "corpus content hash mismatch: manifest {expected}, files {actual}"
        )));
    }
    Ok(Corpus {
        root: dir.to_path_buf(),
        spec,
        n_train,
        n_val,
        entries,
        content_hash: actual,
    })
}

impl Corpus {
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let image = netpbm::read_ppm(&self.root.join(&e.image))?;
                let (h, w, data) = netpbm::read_pgm(&self.root.join(&e.mask))?;
                let mask = LabelMask::new(h, w, data)?;
                if (h, w) != (image.height, image.width) {
                    return Err(Error::data(format!(
                        "{} and {} differ in size",
                        e.image.display(),
                        e.mask.display()
                    )));
                }
                mask.validate(self.spec.num_classes)
                    .map_err(|err| Error::data(format!("{}: {err}", e.mask.display())))?;
                Ok(Sample { image, mask })
            })
            .collect()
    }

    /// Regenerates every listed scene from the recorded spec and compares pixels.
    pub fn verify_regeneration(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let scene = generate_scene(&self.spec, i as u64)?;
            let image = netpbm::read_ppm(&self.root.join(&e.image))?;
            let (_, _, mask) = netpbm::read_pgm(&self.root.join(&e.mask))?;
            if image != scene.image || mask != scene.mask.data() {
                return Err(Error::data(format!(
                    "{} does not match its regenerated scene",
                    e.image.display()
                )));
            }
        }
        Ok(())
    }
}

/// In-memory train/val samples generated straight from a spec.
pub fn generate_samples(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    for i in 0..n_train + n_val {
        let s = generate_scene(spec, i as u64)?;
        let sample = Sample {
            image: s.image,
            mask: s.mask,
        };
        if i < n_train {
            train.push(sample);
        } else {
            val.push(sample);
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        SceneSpec::default().validate().unwrap();
    }

    #[test]
    fn pools_must_partition() {
        let mut s = SceneSpec::default();
        s.pools = vec![vec![1, 2, 3], vec![3, 4, 5, 6, 7]];
        assert!(s.validate().is_err());
        s.pools = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic() {
        let s = SceneSpec::default();
        assert_eq!(
            generate_scene(&s, 3).unwrap(),
            generate_scene(&s, 3).unwrap()
        );
        assert_ne!(
            generate_scene(&s, 3).unwrap(),
            generate_scene(&s, 4).unwrap()
        );
    }

    #[test]
    fn zero_shapes_is_background() {
        let spec = SceneSpec {
            shapes_min: 0,
            shapes_max: 0,
            noise: 0.0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 1).unwrap();
        assert!(scene.mask.data().iter().all(|&v| v == 0));
        let bg = spec
            .background_color(scene.pool)
            .map(|v| (v * 255.0).round() as u8);
        for y in 0..spec.height {
            for x in 0..spec.width {
                assert_eq!(scene.image.get(y, x), bg);
            }
        }
    }

    #[test]
    fn classes_from_one_pool() {
        let s = SceneSpec::default();
        for i in 0..50 {
            let scene = generate_scene(&s, i).unwrap();
            let pool = &s.pools[scene.pool];
            for c in scene.mask.classes_present(s.num_classes) {
                assert!(c == 0 || pool.contains(&c), "scene {i} class {c}");
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let s = SceneSpec {
            seed: 99,
            pools: vec![vec![2, 1], vec![3]],
            num_classes: 4,
            ..SceneSpec::default()
        };
        let kv: BTreeMap<_, _> = s.to_kv().into_iter().collect();
        let mut back = SceneSpec::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, s);
    }
}
