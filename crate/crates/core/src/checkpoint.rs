//! Binary container for parameters, optimizer state and cached targets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DMLS"  u32 version
//! u32 meta_len   meta_len bytes of UTF-8 `key = value` lines
//! u32 entry_count
//! per entry: u32 name_len, name, u8 dtype tag, 4 × u32 dims, raw values
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{
    format_kv, model_config_from_kv, model_config_hash, model_config_to_kv, parse_kv, KvMap,
};
use crate::error::{Error, Result};
use crate::gt::{ImageTargets, LabelMask, MultiLabelTarget};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Element, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DMLS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: [u32; 4],
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let d = t.shape().dims();
        Entry {
            name: name.into(),
            dtype: T::DTYPE,
            dims: d.map(|x| x as u32),
            bytes,
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::data(format!(
                "entry `{}` holds {:?} values, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let [n, c, h, w] = self.dims.map(|x| x as usize);
        let shape = Shape::new(n, c, h, w)?;
        let data = self
            .bytes
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn from_bytes(name: impl Into<String>, dims: [u32; 4], bytes: Vec<u8>) -> Self {
        Entry {
            name: name.into(),
            dtype: DType::U8,
            dims,
            bytes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::data(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data(format!("container truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Container {
    pub fn meta_map(&self) -> KvMap {
        self.meta.iter().cloned().collect()
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = format_kv(&self.meta);
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.entries.len())?;
        for e in &self.entries {
            let expected = e.dims.iter().map(|&d| d as usize).product::<usize>() * e.dtype.size();
            if e.bytes.len() != expected {
                return Err(Error::data(format!(
                    "entry `{}` has {} bytes, dims {:?} need {expected}",
                    e.name,
                    e.bytes.len(),
                    e.dims
                )));
            }
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            for d in e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::data("not a DMLS container (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::data(format!(
                "unsupported container version {version} (this build reads {VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::data("container metadata is not UTF-8"))?;
        let meta_map =
            parse_kv(meta_text).map_err(|e| Error::data(format!("container metadata: {e}")))?;
        // keep file order
        let mut meta = Vec::with_capacity(meta_map.len());
        for line in meta_text.lines() {
            if let Some((k, _)) = line.split_once('=') {
                if let Some(v) = meta_map.get(k.trim()) {
                    meta.push((k.trim().to_string(), v.clone()));
                }
            }
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = r.u32("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| Error::data(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let tag = r.take(1, "dtype tag")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| {
                Error::data(format!("entry `{name}` has unknown dtype tag {tag}"))
            })?;
            let mut dims = [0u32; 4];
            for d in dims.iter_mut() {
                *d = r.u32("entry dims")?;
            }
            let len = dims
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::data(format!("entry `{name}` dims overflow")))?;
            let bytes = r.take(len, &format!("values of `{name}`"))?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                dims,
                bytes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Parameters plus momentum buffers (`opt/<name>`) and the model configuration.
pub fn model_container<T: Element>(model: &Model<T>, extra_meta: &[(String, String)]) -> Container {
    let mut meta = vec![("kind".to_string(), "model".to_string())];
    meta.extend(model_config_to_kv(model.config()));
    meta.extend_from_slice(extra_meta);
    let mut entries = Vec::with_capacity(2 * model.params.len());
    for p in model.params.iter() {
        entries.push(Entry::from_tensor(p.name.clone(), &p.value));
    }
    for p in model.params.iter() {
        entries.push(Entry::from_tensor(format!("opt/{}", p.name), &p.momentum));
    }
    Container { meta, entries }
}

pub fn save_model<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    model_container(model, &[]).write(path)
}

/// Rebuilds a model from a container. With `expected`, a differing stored
/// configuration is a configuration error.
pub fn model_from_container<T: Element>(
    c: &Container,
    expected: Option<&ModelConfig>,
) -> Result<Model<T>> {
    let meta = c.meta_map();
    if meta.get("kind").map(String::as_str) != Some("model") {
        return Err(Error::data("container does not hold a model"));
    }
    let config = model_config_from_kv(&meta, &ModelConfig::default())
        .map_err(|e| Error::data(format!("stored model configuration: {e}")))?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(Error::config(format!(
                "checkpoint configuration does not match:\n  stored:   {}\n  expected: {}",
                format_kv(&model_config_to_kv(&config))
                    .trim()
                    .replace('\n', "; "),
                format_kv(&model_config_to_kv(exp))
                    .trim()
                    .replace('\n', "; ")
            )));
        }
    }
    let mut model = Model::<T>::new(config, 0)?;
    for p in model.params.iter_mut() {
        let value = c
            .entry(&p.name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks parameter `{}`", p.name)))?
            .to_tensor::<T>()?;
        if value.shape() != p.value.shape() {
            return Err(Error::data(format!(
                "parameter `{}` has shape {}, model expects {}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        if let Some(e) = c.entry(&format!("opt/{}", p.name)) {
            let m = e.to_tensor::<T>()?;
            if m.shape() != p.value.shape() {
                return Err(Error::data(format!(
                    "momentum of `{}` has the wrong shape",
                    p.name
                )));
            }
            p.momentum = m;
        }
    }
    Ok(model)
}

pub fn load_model<T: Element>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let c = Container::read(path)?;
    model_from_container(&c, expected).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Hex digest of a label mask's size and pixels.
pub fn mask_hash(mask: &LabelMask) -> String {
    let mut h = Sha256::new();
    h.update((mask.height() as u64).to_le_bytes());
    h.update((mask.width() as u64).to_le_bytes());
    h.update(mask.data());
    hex::encode(h.finalize())
}

/// Serializes precomputed targets; each image is keyed by its mask hash and
/// the whole cache by the model configuration hash.
pub fn targets_container(config: &ModelConfig, items: &[(&LabelMask, &ImageTargets)]) -> Container {
    let meta = vec![
        ("kind".to_string(), "targets".to_string()),
        ("config_hash".to_string(), model_config_hash(config)),
        ("count".to_string(), items.len().to_string()),
    ];
    let mut entries = Vec::new();
    for (mask, t) in items {
        let key = mask_hash(mask);
        let seg = &t.seg;
        entries.push(Entry::from_bytes(
            format!("{key}/seg"),
            [1, 1, seg.height() as u32, seg.width() as u32],
            seg.data().to_vec(),
        ));
        for m in &t.mul {
            entries.push(Entry::from_bytes(
                format!("{key}/mul{}", m.level + 1),
                [1, m.classes as u32, m.height as u32, m.width as u32],
                m.data.clone(),
            ));
        }
    }
    Container { meta, entries }
}

/// Looks up the targets of `mask`; `None` when the cache was built for a
/// different configuration or lacks the mask.
pub fn cached_targets(
    c: &Container,
    config: &ModelConfig,
    mask: &LabelMask,
) -> Result<Option<ImageTargets>> {
    let meta = c.meta_map();
    if meta.get("kind").map(String::as_str) != Some("targets") {
        return Err(Error::data("container does not hold cached targets"));
    }
    if meta.get("config_hash") != Some(&model_config_hash(config)) {
        return Ok(None);
    }
    let key = mask_hash(mask);
    let Some(seg) = c.entry(&format!("{key}/seg")) else {
        return Ok(None);
    };
    if seg.dtype != DType::U8 {
        return Err(Error::data(format!(
            "cached entry `{}` is not byte data",
            seg.name
        )));
    }
    let seg = LabelMask::new(
        seg.dims[2] as usize,
        seg.dims[3] as usize,
        seg.bytes.clone(),
    )?;
    let mut mul = Vec::with_capacity(config.levels);
    for (j, &window) in config.window_sizes.iter().enumerate() {
        let e = c
            .entry(&format!("{key}/mul{}", j + 1))
            .ok_or_else(|| Error::data(format!("cached targets for {key} lack level {}", j + 1)))?;
        if e.dtype != DType::U8 {
            return Err(Error::data(format!(
                "cached entry `{}` is not byte data",
                e.name
            )));
        }
        mul.push(MultiLabelTarget {
            level: j,
            window: crate::gt::mask_grid_window(window, config.dml_extra_stride),
            classes: e.dims[1] as usize,
            height: e.dims[2] as usize,
            width: e.dims[3] as usize,
            data: e.bytes.clone(),
        });
    }
    Ok(Some(ImageTargets { seg, mul }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_model() {
        let mut model = Model::<f32>::new(ModelConfig::grad_check(), 5).unwrap();
        for p in model.params.iter_mut() {
            p.momentum = Tensor::full(p.value.shape(), 0.125);
        }
        let c = model_container(&model, &[]);
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        let loaded: Model<f32> = model_from_container(&back, Some(model.config())).unwrap();
        assert_eq!(loaded.params, model.params);
    }

    #[test]
    fn unknown_version_rejected() {
        let c = Container::default();
        let mut bytes = c.encode().unwrap();
        bytes[4] = 2;
        let err = Container::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn truncated_rejected() {
        let model = Model::<f64>::new(ModelConfig::grad_check(), 1).unwrap();
        let bytes = model_container(&model, &[]).encode().unwrap();
        assert!(Container::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Container::decode(b"XXXX\x01\0\0\0").is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let model = Model::<f64>::new(ModelConfig::grad_check(), 1).unwrap();
        let c = model_container(&model, &[]);
        assert!(model_from_container::<f32>(&c, None).is_err());
    }

    #[test]
    fn config_mismatch_is_config_error() {
        let model = Model::<f32>::new(ModelConfig::grad_check(), 1).unwrap();
        let c = model_container(&model, &[]);
        let other = ModelConfig::grad_check().with_levels(1).unwrap();
        assert!(matches!(
            model_from_container::<f32>(&c, Some(&other)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn targets_cache_round_trip() {
        let config = ModelConfig::grad_check();
        let mut mask = LabelMask::filled(32, 32, 0);
        for y in 4..20 {
            for x in 10..30 {
                mask.set(y, x, 3);
            }
        }
        let t = crate::gt::prepare_targets(&mask, &config).unwrap();
        let c = targets_container(&config, &[(&mask, &t)]);
        let c = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(cached_targets(&c, &config, &mask).unwrap(), Some(t));
        let other = config.with_levels(2).unwrap();
        assert_eq!(cached_targets(&c, &other, &mask).unwrap(), None);
        assert_eq!(
            cached_targets(&c, &config, &LabelMask::filled(32, 32, 1)).unwrap(),
            None
        );
    }
}
