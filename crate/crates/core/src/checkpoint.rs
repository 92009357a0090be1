//! Checkpoint container.
//!
//! A checkpoint is a single safetensors file. Tensors are stored as `F32`
//! under hierarchical names with a group prefix:
//!
//! | prefix     | content                                   |
//! |------------|-------------------------------------------|
//! | `param/`   | trainable parameters, e.g. `param/depth.encoder.conv1.weight` |
//! | `buffer/`  | batch-norm running statistics             |
//! | `adam_m/`  | first-moment estimates of the optimizer   |
//! | `adam_v/`  | second-moment estimates of the optimizer  |
//!
//! The header metadata holds string entries: `format` (always
//! `monodistill-checkpoint`), `version`, `config` (the full training config as
//! `key = value` lines), `epoch`, `step_in_epoch`, `global_step` and
//! `adam_t`. Readers reject unknown formats and newer versions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors};

use crate::{Error, Result};

pub const FORMAT: &str = "monodistill-checkpoint";
pub const VERSION: u32 = 1;

/// Contents of one checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    /// Tensors keyed by their full prefixed name.
    pub tensors: BTreeMap<String, Tensor>,
    pub config: String,
    /// Completed epochs (1-based count) when `step_in_epoch` is 0.
    pub epoch: usize,
    /// Batches already consumed in the epoch after `epoch`.
    pub step_in_epoch: usize,
    pub global_step: usize,
    pub adam_t: u64,
}

impl Checkpoint {
    /// Tensors under `prefix/`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_group(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Writes atomically: the file appears complete or not at all.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt_err = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let mut bytes = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let raw: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            bytes.push((name.clone(), t.dims().to_vec(), raw));
        }
        let views = bytes
            .iter()
            .map(|(n, shape, raw)| Ok((n.clone(), safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), raw).map_err(ckpt_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = [
            ("format", FORMAT.to_string()),
            ("version", VERSION.to_string()),
            ("config", self.config.clone()),
            ("epoch", self.epoch.to_string()),
            ("step_in_epoch", self.step_in_epoch.to_string()),
            ("global_step", self.global_step.to_string()),
            ("adam_t", self.adam_t.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let data = safetensors::serialize(views, Some(meta)).map_err(ckpt_err)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&data).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing metadata `{k}`")));
        if get("format")? != FORMAT {
            return Err(bad(format!("not a {FORMAT} file")));
        }
        let version: u32 = get("version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version > VERSION {
            return Err(bad(format!("version {version} is newer than supported {VERSION}")));
        }
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let st = SafeTensors::deserialize(&data).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name}: expected F32, found {:?}", view.dtype())));
            }
            let v: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(v, view.shape(), &Device::Cpu)?);
        }
        Ok(Self {
            tensors,
            config: get("config")?.clone(),
            epoch: num("epoch")? as usize,
            step_in_epoch: num("step_in_epoch")? as usize,
            global_step: num("global_step")? as usize,
            adam_t: num("adam_t")?,
        })
    }
}
