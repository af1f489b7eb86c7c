//! Named-tensor container (`.st`) and the layer-group index that
//! hierarchical merging operates on.
//!
//! File layout: an 8-byte little-endian header length, a JSON header mapping
//! each tensor name to `{"dtype": "F32", "shape": [...], "data_offsets": [start, end]}`
//! (plus an optional `__metadata__` string map), then the contiguous
//! little-endian payload. Offsets are relative to the start of the payload and
//! must tile it exactly, in any order, with no overlap and no gap.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::Value;

use crate::error::{Error, ParseError, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const METADATA_KEY: &str = "__metadata__";
pub const META_MODEL_ID: &str = "model_id";
pub const META_CONFIG_JSON: &str = "config_json";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub allow_nonfinite: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: IndexMap<String, Tensor>,
    metadata: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::Input(format!("`{METADATA_KEY}` is reserved")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Input(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing tensor in place, keeping its position.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("no tensor named `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "replacement for `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Like [`get`](Self::get) but reports a missing tensor as a dimension error.
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Dimension(format!("missing tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> &IndexMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn model_id(&self) -> Option<&str> {
        self.metadata.get(META_MODEL_ID).map(String::as_str)
    }

    /// Model configuration stored under `config_json`.
    pub fn config(&self) -> Result<ModelConfig> {
        let raw = self.metadata.get(META_CONFIG_JSON).ok_or_else(|| {
            Error::Input(format!("checkpoint metadata has no `{META_CONFIG_JSON}`"))
        })?;
        let cfg: ModelConfig = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            let meta = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.into(), Value::Object(meta));
        }
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let len = (t.numel() * 4) as u64;
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": "F32",
                    "shape": t.shape(),
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Self, ParseError> {
        if bytes.len() < 8 {
            return Err(ParseError::MissingHeaderLength(bytes.len()));
        }
        let declared = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if declared > available {
            return Err(ParseError::HeaderOutOfBounds {
                declared,
                available,
            });
        }
        let header_end = 8 + declared as usize;
        let header: OrderedHeader = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| match DuplicateKey::extract(&e) {
                Some(name) => ParseError::DuplicateName(name),
                None => ParseError::MalformedHeader(e.to_string()),
            })?;
        let payload = &bytes[header_end..];

        let mut metadata = IndexMap::new();
        let mut specs = Vec::new();
        for (name, value) in header.0 {
            if name == METADATA_KEY {
                let obj = value.as_object().ok_or_else(|| {
                    ParseError::MalformedHeader(format!("`{METADATA_KEY}` must be an object"))
                })?;
                for (k, v) in obj {
                    let s = v.as_str().ok_or_else(|| {
                        ParseError::MalformedHeader(format!("metadata value for `{k}` must be a string"))
                    })?;
                    metadata.insert(k.clone(), s.to_owned());
                }
                continue;
            }
            specs.push(TensorSpec::parse(name, &value)?);
        }

        let mut by_start: Vec<&TensorSpec> = specs.iter().collect();
        by_start.sort_by_key(|s| (s.start, s.end));
        let mut expected = 0u64;
        for s in &by_start {
            if s.start != expected {
                return Err(ParseError::OverlappingRanges {
                    name: s.name.clone(),
                    start: s.start,
                    end: s.end,
                    expected,
                });
            }
            expected = s.end;
        }
        let actual = payload.len() as u64;
        if expected > actual {
            return Err(ParseError::Truncated { expected, actual });
        }
        if expected < actual {
            return Err(ParseError::TrailingBytes { expected, actual });
        }

        let mut entries = IndexMap::with_capacity(specs.len());
        for s in specs {
            let raw = &payload[s.start as usize..s.end as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if !opts.allow_nonfinite && data.iter().any(|v| !v.is_finite()) {
                return Err(ParseError::NonFinite(s.name));
            }
            let tensor = Tensor::new(s.shape, data).map_err(|e| ParseError::BadShape {
                name: s.name.clone(),
                reason: e.to_string(),
            })?;
            entries.insert(s.name, tensor);
        }
        Ok(Self { entries, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, opts).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    start: u64,
    end: u64,
}

impl TensorSpec {
    fn parse(name: String, value: &Value) -> Result<Self, ParseError> {
        let malformed = |what: &str| ParseError::MalformedHeader(format!("tensor `{name}`: {what}"));
        let obj = value.as_object().ok_or_else(|| malformed("entry must be an object"))?;
        let dtype = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing string `dtype`"))?;
        if dtype != "F32" {
            return Err(ParseError::UnsupportedDtype {
                name,
                dtype: dtype.to_owned(),
            });
        }
        let shape = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing array `shape`"))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
        let offsets = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing array `data_offsets`"))?;
        let (start, end) = match offsets.as_slice() {
            [a, b] => match (a.as_u64(), b.as_u64()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(malformed("data_offsets must be integers")),
            },
            _ => return Err(malformed("data_offsets must have two entries")),
        };
        if shape.is_empty() || shape.contains(&0) {
            return Err(ParseError::BadShape {
                name,
                reason: format!("shape {shape:?} must have rank >= 1 and extents >= 1"),
            });
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| malformed("shape overflows"))?;
        if end < start || end - start != numel * 4 {
            return Err(ParseError::BadShape {
                name,
                reason: format!("byte range [{start}, {end}) does not hold {numel} f32 values"),
            });
        }
        Ok(Self {
            name,
            shape,
            start,
            end,
        })
    }
}

/// Top-level JSON object kept in document order, rejecting duplicate keys.
struct OrderedHeader(Vec<(String, Value)>);

struct DuplicateKey;

impl DuplicateKey {
    const TAG: &'static str = "duplicate tensor name: ";

    fn extract(e: &serde_json::Error) -> Option<String> {
        let msg = e.to_string();
        let rest = msg.strip_prefix(Self::TAG)?;
        // serde_json appends " at line X column Y"
        let end = rest.rfind(" at line ").unwrap_or(rest.len());
        Some(rest[..end].to_owned())
    }
}

impl<'de> Deserialize<'de> for OrderedHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<OrderedHeader, A::Error> {
                let mut seen = HashSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(serde::de::Error::custom(format!("{}{k}", DuplicateKey::TAG)));
                    }
                    out.push((k, v));
                }
                Ok(OrderedHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Where a tensor sits in the network, parsed from its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorSlot {
    Embedding,
    Block(usize),
    FinalNorm,
    LmHead,
}

const BLOCK_SUFFIXES: &[&str] = &[
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "mlp.w_gate",
    "mlp.w_up",
    "mlp.w_down",
    "norm_attn",
    "norm_mlp",
];

/// Parses a name against the checkpoint naming grammar.
pub fn parse_tensor_name(name: &str) -> Option<TensorSlot> {
    match name {
        "embed.tok" => return Some(TensorSlot::Embedding),
        "final_norm" => return Some(TensorSlot::FinalNorm),
        "lm_head" => return Some(TensorSlot::LmHead),
        _ => {}
    }
    let rest = name.strip_prefix("layers.")?;
    let (idx, suffix) = rest.split_once('.')?;
    if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) || (idx.len() > 1 && idx.starts_with('0')) {
        return None;
    }
    if !BLOCK_SUFFIXES.contains(&suffix) {
        return None;
    }
    idx.parse().ok().map(TensorSlot::Block)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerGroup {
    pub id: usize,
    pub names: Vec<String>,
}

/// Partition of a checkpoint's tensors into `num_layers + 1` merge groups:
/// `embed.tok` → 0, `layers.{i}.*` → `i + 1`, and `final_norm`/`lm_head`
/// share the last group with the deepest block.
///
/// Group `g` lines up with hidden-state tap `g` (0 = embedding output,
/// `i` = output of block `i - 1`).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerGroupIndex {
    pub groups: Vec<LayerGroup>,
}

impl LayerGroupIndex {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, name: &str) -> Option<usize> {
        self.groups
            .iter()
            .find(|g| g.names.iter().any(|n| n == name))
            .map(|g| g.id)
    }

    /// Group id for every tensor, in the checkpoint's order.
    pub fn assignment<'a>(&self, ckpt: &'a Checkpoint) -> Result<Vec<(&'a str, usize)>> {
        let mut lookup = std::collections::HashMap::new();
        for g in &self.groups {
            for n in &g.names {
                lookup.insert(n.as_str(), g.id);
            }
        }
        ckpt.names()
            .map(|n| {
                lookup
                    .get(n)
                    .map(|&g| (n, g))
                    .ok_or_else(|| Error::Grouping(format!("tensor `{n}` is not in the layer index")))
            })
            .collect()
    }
}

/// Groups tensors by depth. Blocks are numbered from zero in names; block `i`
/// lands in group `i + 1`, while `final_norm` and `lm_head` share the last
/// group with the deepest block.
pub fn build_layer_index(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<LayerGroupIndex> {
    let layers = cfg.num_layers;
    let g_count = layers + 1;
    let mut groups: Vec<LayerGroup> = (0..g_count)
        .map(|id| LayerGroup { id, names: vec![] })
        .collect();
    let mut orphans = Vec::new();
    let mut out_of_range = Vec::new();
    for name in ckpt.names() {
        let g = match parse_tensor_name(name) {
            None => {
                orphans.push(name.to_owned());
                continue;
            }
            Some(TensorSlot::Embedding) => 0,
            Some(TensorSlot::Block(i)) if i >= layers => {
                out_of_range.push(name.to_owned());
                continue;
            }
            Some(TensorSlot::Block(i)) => i + 1,
            Some(TensorSlot::FinalNorm | TensorSlot::LmHead) => g_count - 1,
        };
        groups[g].names.push(name.to_owned());
    }
    if !orphans.is_empty() {
        return Err(Error::Grouping(format!(
            "tensor names outside the naming grammar: {}",
            orphans.join(", ")
        )));
    }
    if !out_of_range.is_empty() {
        return Err(Error::Grouping(format!(
            "config declares {layers} layers but checkpoint contains {}",
            out_of_range.join(", ")
        )));
    }
    let index = LayerGroupIndex { groups };
    let grouped: usize = index
        .groups
        .iter()
        .flat_map(|g| &g.names)
        .map(|n| ckpt.get(n).map_or(0, Tensor::numel))
        .sum();
    debug_assert_eq!(grouped, ckpt.num_params());
    Ok(index)
}
