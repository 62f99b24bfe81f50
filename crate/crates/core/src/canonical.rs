//! Canonical model serialization and hashing.
//!
//! Ownership evidence ultimately rests on statements like "the hash of this
//! model file matches the registered one", so serialization must be
//! bit-exact across platforms and runs. The format is JSON with sorted keys
//! and no whitespace, and every `f64` is written as its IEEE-754 bit
//! pattern in big-endian hex under an `"f64hex"` wrapper — decimal
//! formatting never enters the picture.
//!
//! Two documents are defined here:
//!
//! * the model document `{"backbone":..,"c_p":..,"c_wm":..,"taps":..,"version":1}`;
//!   its *published* variant blanks `c_wm` and `taps`, since those stay
//!   with the watermark owner;
//! * the watermark-head document `{"enc":..,"layers":..,"taps":..,"version":1}`,
//!   which carries everything a verifier needs to rebuild the branch on
//!   top of a published model.

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::keys::EncoderKind;
use crate::nn::{Activation, DenseLayer, MultiTaskModel, NetworkParams};

const FORMAT_VERSION: u64 = 1;

fn f64_to_value(v: f64, location: &str) -> Result<Value> {
    if !v.is_finite() {
        return Err(CoreError::Parse {
            location: location.into(),
            message: format!("cannot serialize non-finite value {v}"),
        });
    }
    Ok(json!({ "f64hex": format!("{:016x}", v.to_bits()) }))
}

fn f64_from_value(value: &Value, location: &str) -> Result<f64> {
    let obj = value.as_object().ok_or_else(|| parse_err(location, "expected f64hex object"))?;
    if obj.len() != 1 {
        return Err(parse_err(location, "f64hex object must have exactly one key"));
    }
    let hex = obj
        .get("f64hex")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(location, "missing f64hex string"))?;
    if hex.len() != 16 {
        return Err(parse_err(location, "f64hex must be 16 hex digits"));
    }
    let bits = u64::from_str_radix(hex, 16)
        .map_err(|e| parse_err(location, &format!("bad f64hex digits: {e}")))?;
    Ok(f64::from_bits(bits))
}

fn parse_err(location: &str, message: &str) -> CoreError {
    CoreError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

fn layer_to_value(layer: &DenseLayer, location: &str) -> Result<Value> {
    let w = layer
        .w
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(c, &v)| f64_to_value(v, &format!("{location}.w[{r}][{c}]")))
                .collect::<Result<Vec<_>>>()
                .map(Value::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let b = layer
        .b
        .iter()
        .enumerate()
        .map(|(i, &v)| f64_to_value(v, &format!("{location}.b[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    // serde_json's default map is a BTreeMap, so keys come out sorted no
    // matter the insertion order here.
    let mut obj = Map::new();
    obj.insert("act".into(), Value::from(layer.activation.name()));
    obj.insert("b".into(), Value::from(b));
    obj.insert("w".into(), Value::from(w));
    Ok(Value::Object(obj))
}

fn layer_from_value(value: &Value, location: &str) -> Result<DenseLayer> {
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(location, "expected layer object"))?;
    let act = obj
        .get("act")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(location, "missing act"))?;
    let activation = Activation::from_name(act)?;
    let w_rows = obj
        .get("w")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(location, "missing w"))?;
    let mut w = Vec::with_capacity(w_rows.len());
    for (r, row) in w_rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| parse_err(&format!("{location}.w[{r}]"), "expected array"))?;
        let mut out = Vec::with_capacity(row.len());
        for (c, v) in row.iter().enumerate() {
            out.push(f64_from_value(v, &format!("{location}.w[{r}][{c}]"))?);
        }
        w.push(out);
    }
    let b_vals = obj
        .get("b")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(location, "missing b"))?;
    let mut b = Vec::with_capacity(b_vals.len());
    for (i, v) in b_vals.iter().enumerate() {
        b.push(f64_from_value(v, &format!("{location}.b[{i}]"))?);
    }
    Ok(DenseLayer { w, b, activation })
}

fn network_to_value(params: &NetworkParams, location: &str) -> Result<Value> {
    params
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_to_value(l, &format!("{location}[{i}]")))
        .collect::<Result<Vec<_>>>()
        .map(Value::from)
}

fn network_from_value(value: &Value, location: &str) -> Result<NetworkParams> {
    let layers = value
        .as_array()
        .ok_or_else(|| parse_err(location, "expected layer array"))?;
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_value(l, &format!("{location}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkParams { layers })
}

fn taps_to_value(taps: &[usize]) -> Value {
    Value::from(taps.iter().map(|&t| t as u64).collect::<Vec<_>>())
}

fn taps_from_value(value: &Value, location: &str) -> Result<Vec<usize>> {
    let arr = value
        .as_array()
        .ok_or_else(|| parse_err(location, "expected tap array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_u64()
                .map(|t| t as usize)
                .ok_or_else(|| parse_err(&format!("{location}[{i}]"), "expected integer"))
        })
        .collect()
}

fn check_version(obj: &Map<String, Value>, location: &str) -> Result<()> {
    match obj.get("version").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => Ok(()),
        Some(v) => Err(parse_err(location, &format!("unsupported version {v}"))),
        None => Err(parse_err(location, "missing version")),
    }
}

fn model_value(model: &MultiTaskModel, include_wm: bool) -> Result<Value> {
    let mut obj = Map::new();
    obj.insert("backbone".into(), network_to_value(&model.backbone, "backbone")?);
    obj.insert("c_p".into(), network_to_value(&model.c_p, "c_p")?);
    if include_wm {
        obj.insert("c_wm".into(), network_to_value(&model.c_wm, "c_wm")?);
        obj.insert("taps".into(), taps_to_value(&model.taps));
    } else {
        obj.insert("c_wm".into(), Value::Array(Vec::new()));
        obj.insert("taps".into(), Value::Array(Vec::new()));
    }
    obj.insert("version".into(), Value::from(FORMAT_VERSION));
    Ok(Value::Object(obj))
}

/// Canonical bytes of the full model, watermark head included.
pub fn model_to_json(model: &MultiTaskModel) -> Result<String> {
    Ok(model_value(model, true)?.to_string())
}

/// Canonical bytes of the *published* model: backbone and primary head
/// only, with `c_wm` and `taps` blanked. This is the document `hash(M)`
/// commitments refer to.
pub fn published_to_json(model: &MultiTaskModel) -> Result<String> {
    Ok(model_value(model, false)?.to_string())
}

/// Rebuild a model from canonical bytes. The `w0` anchor is runtime state
/// and is never serialized, so it comes back as `None`.
pub fn model_from_json(text: &str) -> Result<MultiTaskModel> {
    let value: Value = serde_json::from_str(text).map_err(|e| CoreError::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| parse_err("$", "expected object"))?;
    check_version(obj, "$")?;
    let backbone = network_from_value(
        obj.get("backbone").ok_or_else(|| parse_err("$", "missing backbone"))?,
        "backbone",
    )?;
    let c_p = network_from_value(obj.get("c_p").ok_or_else(|| parse_err("$", "missing c_p"))?, "c_p")?;
    let c_wm = network_from_value(
        obj.get("c_wm").ok_or_else(|| parse_err("$", "missing c_wm"))?,
        "c_wm",
    )?;
    let taps = taps_from_value(obj.get("taps").ok_or_else(|| parse_err("$", "missing taps"))?, "taps")?;
    MultiTaskModel::new(backbone, c_p, c_wm, taps)
}

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// SHA-256 of the published canonical bytes — the model identity used in
/// claims and attestations.
pub fn published_hash(model: &MultiTaskModel) -> Result<[u8; 32]> {
    Ok(sha256_bytes(published_to_json(model)?.as_bytes()))
}

/// Everything a verifier needs to rebuild the watermark branch on top of a
/// published model: the head parameters, which backbone layers they tap,
/// and how trigger indices are encoded into inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct WmHeadSpec {
    pub layers: NetworkParams,
    pub taps: Vec<usize>,
    pub encoder: EncoderKind,
}

impl WmHeadSpec {
    pub fn from_model(model: &MultiTaskModel, encoder: EncoderKind) -> Self {
        Self {
            layers: model.c_wm.clone(),
            taps: model.taps.clone(),
            encoder,
        }
    }
}

fn encoder_to_value(kind: &EncoderKind) -> Value {
    let mut obj = Map::new();
    let dims: Vec<u64> = match *kind {
        EncoderKind::BitSignVector { dim } => vec![dim as u64],
        EncoderKind::BitGrid { height, width } => vec![height as u64, width as u64],
    };
    obj.insert("dims".into(), Value::from(dims));
    obj.insert("kind".into(), Value::from(kind.name()));
    Value::Object(obj)
}

fn encoder_from_value(value: &Value, location: &str) -> Result<EncoderKind> {
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(location, "expected encoder object"))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(location, "missing kind"))?;
    let dims: Vec<usize> = obj
        .get("dims")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(location, "missing dims"))?
        .iter()
        .map(|v| v.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| parse_err(location, "dims must be integers"))?;
    match (kind, dims.as_slice()) {
        ("bit-sign-vector", [dim]) => Ok(EncoderKind::BitSignVector { dim: *dim }),
        ("bit-grid", [height, width]) => Ok(EncoderKind::BitGrid {
            height: *height,
            width: *width,
        }),
        _ => Err(parse_err(location, "unknown encoder kind or wrong dims arity")),
    }
}

/// Canonical bytes of the watermark-head document. `hash(c_WM)` in the
/// notarization protocol is SHA-256 over exactly these bytes.
pub fn head_to_json(head: &WmHeadSpec) -> Result<String> {
    let mut obj = Map::new();
    obj.insert("enc".into(), encoder_to_value(&head.encoder));
    obj.insert("layers".into(), network_to_value(&head.layers, "layers")?);
    obj.insert("taps".into(), taps_to_value(&head.taps));
    obj.insert("version".into(), Value::from(FORMAT_VERSION));
    Ok(Value::Object(obj).to_string())
}

pub fn head_from_json(text: &str) -> Result<WmHeadSpec> {
    let value: Value = serde_json::from_str(text).map_err(|e| CoreError::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| parse_err("$", "expected object"))?;
    check_version(obj, "$")?;
    let layers = network_from_value(
        obj.get("layers").ok_or_else(|| parse_err("$", "missing layers"))?,
        "layers",
    )?;
    layers.validate()?;
    let taps = taps_from_value(obj.get("taps").ok_or_else(|| parse_err("$", "missing taps"))?, "taps")?;
    let encoder = encoder_from_value(obj.get("enc").ok_or_else(|| parse_err("$", "missing enc"))?, "enc")?;
    Ok(WmHeadSpec {
        layers,
        taps,
        encoder,
    })
}

pub fn head_hash(head: &WmHeadSpec) -> Result<[u8; 32]> {
    Ok(sha256_bytes(head_to_json(head)?.as_bytes()))
}

pub fn save_model(model: &MultiTaskModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MultiTaskModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

pub fn save_head(head: &WmHeadSpec, path: &Path) -> Result<()> {
    std::fs::write(path, head_to_json(head)?)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<WmHeadSpec> {
    let text = std::fs::read_to_string(path)?;
    head_from_json(&text)
}
