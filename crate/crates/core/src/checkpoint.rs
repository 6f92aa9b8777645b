//! Tensor archives, model checkpoints and external-weight import.
//!
//! An archive is a safetensors file of `f32` tensors whose header carries a
//! single metadata entry: a JSON document
//! `{format_version, kind, config, name_map_id, state}`. Serialization is
//! deterministic, so saving the same content twice yields identical bytes.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use retouch_tensor::{Array, ParamStore};
use safetensors::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GanPrior, GpConfig, CONST_NAME};
use crate::model::{ModelConfig, Retoucher};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "retouch";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveMeta {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub name_map_id: Option<String>,
    #[serde(default)]
    pub state: serde_json::Value,
}

impl ArchiveMeta {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self { format_version: FORMAT_VERSION, kind: kind.into(), config, name_map_id: None, state: serde_json::Value::Null }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: ArchiveMeta,
    pub tensors: BTreeMap<String, Array<f32>>,
}

struct F32View<'a> {
    array: &'a Array<f32>,
}

impl View for F32View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        self.array.shape()
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.array.data().iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.array.len() * 4
    }
}

fn rejected(msg: impl Into<String>) -> Error {
    Error::Checkpoint(vec![msg.into()])
}

impl Archive {
    pub fn new(meta: ArchiveMeta) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, a) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), a.clone());
        }
    }

    /// Tensors under `prefix`, with the prefix removed.
    pub fn store(&self, prefix: &str) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, a) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, a.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)?;
        let views = self.tensors.iter().map(|(k, v)| (k.as_str(), F32View { array: v }));
        safetensors::serialize(views, Some(HashMap::from([(META_KEY.to_string(), meta)])))
            .map_err(|e| rejected(format!("serialization failed: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| rejected(format!("unreadable archive: {e}")))?;
        let raw_meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| rejected("archive has no metadata header"))?;
        let version: serde_json::Value = serde_json::from_str(raw_meta)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            other => {
                return Err(rejected(format!(
                    "format version {} is not supported (expected {FORMAT_VERSION})",
                    other.map_or("<missing>".to_string(), |v| v.to_string())
                )))
            }
        }
        let meta: ArchiveMeta = serde_json::from_value(version)?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| rejected(format!("unreadable archive: {e}")))?;
        let tensors = read_tensors(&st)?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_tensors(st: &SafeTensors<'_>) -> Result<BTreeMap<String, Array<f32>>> {
    let mut problems = Vec::new();
    let mut out = BTreeMap::new();
    for (name, view) in st.iter() {
        if view.dtype() != Dtype::F32 {
            problems.push(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype()));
            continue;
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.insert(name.to_string(), Array::from_vec(view.shape(), data));
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Checkpoint(problems))
    }
}

/// Reads name → shape of every tensor in a safetensors file, whatever its
/// dtype and metadata.
pub fn tensor_shapes(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| rejected(format!("unreadable archive: {e}")))?;
    Ok(st.iter().map(|(n, v)| (n.to_string(), v.shape().to_vec())).collect())
}

pub fn save_model(path: &Path, model: &Retoucher<f32>) -> Result<()> {
    let mut archive = Archive::new(ArchiveMeta::new("model", serde_json::to_value(model.config())?));
    archive.insert_store("", model.params());
    archive.save(path)
}

pub fn load_model(path: &Path) -> Result<Retoucher<f32>> {
    let archive = Archive::load(path)?;
    model_from_archive(&archive, "")
}

/// Rebuilds a model from an archive whose metadata config (or, for
/// training states, `config.model`) describes it.
pub fn model_from_archive(archive: &Archive, prefix: &str) -> Result<Retoucher<f32>> {
    let cfg = match archive.meta.kind.as_str() {
        "model" => archive.meta.config.clone(),
        "training_state" => archive.meta.config.get("model").cloned().unwrap_or_default(),
        other => return Err(rejected(format!("archive kind `{other}` holds no retoucher"))),
    };
    let config: ModelConfig = serde_json::from_value(cfg)?;
    Retoucher::from_params(config, archive.store(prefix))
}

/// Maps external tensor names to internal parameter names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NameMap {
    pub id: String,
    /// External name → internal name.
    pub map: BTreeMap<String, String>,
}

impl NameMap {
    pub fn identity(id: &str, names: impl IntoIterator<Item = String>) -> Self {
        Self { id: id.into(), map: names.into_iter().map(|n| (n.clone(), n)).collect() }
    }

    /// Names used by the widely distributed PyTorch port of StyleGAN2
    /// (`g_ema` state dict), for a generator with `config.levels` levels.
    pub fn stylegan2_pytorch(config: &GpConfig) -> Self {
        let l = config.levels;
        let mut map = BTreeMap::new();
        let mut styled = |ext: String, int: String| {
            for suffix in ["conv.weight", "conv.modulation.weight", "conv.modulation.bias", "noise.weight", "activate.bias"] {
                map.insert(format!("{ext}.{suffix}"), format!("{int}.{suffix}"));
            }
        };
        styled("conv1".into(), format!("gp.level{l}.conv1"));
        for k in 0..l - 1 {
            styled(format!("convs.{}", 2 * k), format!("gp.level{}.conv1", l - 1 - k));
            styled(format!("convs.{}", 2 * k + 1), format!("gp.level{}.conv2", l - 1 - k));
        }
        let mut rgb = |ext: String, int: String| {
            for suffix in ["conv.weight", "conv.modulation.weight", "conv.modulation.bias", "bias"] {
                map.insert(format!("{ext}.{suffix}"), format!("{int}.{suffix}"));
            }
        };
        rgb("to_rgb1".into(), format!("gp.level{l}.to_rgb"));
        for k in 0..l - 1 {
            rgb(format!("to_rgbs.{k}"), format!("gp.level{}.to_rgb", l - 1 - k));
        }
        map.insert("input.input".into(), CONST_NAME.into());
        Self { id: format!("stylegan2-pytorch-L{l}"), map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Internal → external.
    pub fn inverse(&self) -> BTreeMap<&str, &str> {
        self.map.iter().map(|(e, i)| (i.as_str(), e.as_str())).collect()
    }

    /// Checks that external tensors of the given shapes can populate every
    /// backbone parameter of `config`. Returns one line per problem.
    pub fn check_shapes(&self, external: &BTreeMap<String, Vec<usize>>, config: &GpConfig) -> Result<()> {
        let specs = GanPrior::new(config.clone())?.specs();
        let inverse = self.inverse();
        let mut problems = Vec::new();
        for spec in &specs {
            let Some(ext) = inverse.get(spec.name.as_str()) else {
                problems.push(format!("no external name maps to `{}`", spec.name));
                continue;
            };
            match external.get(*ext) {
                None => problems.push(format!("missing tensor `{ext}` (for `{}`)", spec.name)),
                Some(shape) if squeeze(shape) != squeeze(&spec.shape) => problems.push(format!(
                    "tensor `{ext}` has shape {shape:?}, `{}` needs {:?}",
                    spec.name, spec.shape
                )),
                Some(_) => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems))
        }
    }
}

fn squeeze(shape: &[usize]) -> Vec<usize> {
    shape.iter().copied().filter(|&d| d != 1).collect()
}

/// Loads backbone weights from an external safetensors file through
/// `name_map`. Unmapped external tensors are ignored; any missing or
/// mis-shaped tensor refuses the whole load.
pub fn import_external_checkpoint(path: &Path, name_map: &NameMap, config: &GpConfig) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| rejected(format!("unreadable archive: {e}")))?;
    let shapes: BTreeMap<String, Vec<usize>> = st.iter().map(|(n, v)| (n.to_string(), v.shape().to_vec())).collect();
    name_map.check_shapes(&shapes, config)?;
    let specs = GanPrior::new(config.clone())?.specs();
    let inverse = name_map.inverse();
    let mut store = ParamStore::new();
    let mut problems = Vec::new();
    for spec in specs {
        let ext = inverse[spec.name.as_str()];
        let view = st.tensor(ext).map_err(|e| rejected(format!("tensor `{ext}`: {e}")))?;
        if view.dtype() != Dtype::F32 {
            problems.push(format!("tensor `{ext}` has dtype {:?}, expected F32", view.dtype()));
            continue;
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let a = Array::from_vec(&spec.shape, data);
        if !a.all_finite() {
            problems.push(format!("tensor `{ext}` has non-finite entries"));
        }
        store.insert(spec.name, a);
    }
    if problems.is_empty() {
        Ok(store)
    } else {
        Err(Error::Checkpoint(problems))
    }
}

/// Writes backbone weights under their external names.
pub fn export_external_checkpoint(path: &Path, params: &ParamStore<f32>, name_map: &NameMap, config: &GpConfig) -> Result<()> {
    let gp = GanPrior::new(config.clone())?;
    gp.validate_params(params)?;
    let inverse = name_map.inverse();
    let mut meta = ArchiveMeta::new("gp", serde_json::to_value(config)?);
    meta.name_map_id = Some(name_map.id.clone());
    let mut archive = Archive::new(meta);
    let mut problems = Vec::new();
    for spec in gp.specs() {
        match inverse.get(spec.name.as_str()) {
            Some(ext) => {
                archive.tensors.insert(ext.to_string(), params.get(&spec.name).expect("validated").clone());
            }
            None => problems.push(format!("no external name for `{}`", spec.name)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems));
    }
    archive.save(path)
}
