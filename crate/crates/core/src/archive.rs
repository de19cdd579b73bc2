//! Bit-exact model persistence: a JSON manifest whose weight blocks are
//! base64-encoded little-endian binary64 arrays, checksummed per network.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Activation, AffineMap, Layer, MlpNet, Tensor};
use crate::error::{Error, Result};
use crate::nets::{Hyperparams, ObserverModel};
use crate::system::{Dims, OutputMap};

pub const FORMAT: &str = "dissobs-model";
pub const VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerBlock {
    rows: usize,
    cols: usize,
    activation: Activation,
    weight: String,
    bias: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapBlock {
    center: String,
    scale: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetBlock {
    name: String,
    layers: Vec<LayerBlock>,
    input_map: Option<MapBlock>,
    output_map: Option<MapBlock>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dims: Dims,
    output: OutputMap,
    hyper: Hyperparams,
    /// Free-form provenance (plant, config hash, tool version, ...).
    meta: Vec<(String, String)>,
    nets: Vec<NetBlock>,
}

fn encode(v: &[f64], hasher: &mut Sha256) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    hasher.update(&bytes);
    B64.encode(bytes)
}

fn decode(s: &str, net: &str, hasher: &mut Sha256) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Checksum(format!("{net}: unreadable weight block ({e})")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checksum(format!("{net}: weight block is not a whole number of binary64 values")));
    }
    hasher.update(&bytes);
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn net_block(name: &str, net: &MlpNet) -> NetBlock {
    let mut h = Sha256::new();
    let layers = net
        .layers
        .iter()
        .map(|l| LayerBlock {
            rows: l.weight.rows(),
            cols: l.weight.cols(),
            activation: l.activation,
            weight: encode(l.weight.data(), &mut h),
            bias: encode(l.bias.data(), &mut h),
        })
        .collect();
    let mut map = |m: &Option<AffineMap>| m.as_ref().map(|m| MapBlock { center: encode(m.center.data(), &mut h), scale: encode(m.scale.data(), &mut h) });
    let input_map = map(&net.input_map);
    let output_map = map(&net.output_map);
    NetBlock { name: name.to_string(), layers, input_map, output_map, sha256: format!("{:x}", h.finalize()) }
}

fn read_net(b: &NetBlock) -> Result<MlpNet> {
    let mut h = Sha256::new();
    let mut layers = Vec::with_capacity(b.layers.len());
    for l in &b.layers {
        let w = decode(&l.weight, &b.name, &mut h)?;
        let bias = decode(&l.bias, &b.name, &mut h)?;
        layers.push((l, w, bias));
    }
    let mut map = |m: &Option<MapBlock>| -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        m.as_ref().map(|m| Ok((decode(&m.center, &b.name, &mut h)?, decode(&m.scale, &b.name, &mut h)?))).transpose()
    };
    let input_map = map(&b.input_map)?;
    let output_map = map(&b.output_map)?;
    if format!("{:x}", h.finalize()) != b.sha256 {
        return Err(Error::Checksum(format!("network {}", b.name)));
    }
    let layers = layers
        .into_iter()
        .map(|(l, w, bias)| {
            Ok(Layer { weight: Tensor::new(l.rows, l.cols, w)?, bias: Tensor::new(1, l.rows, bias)?, activation: l.activation })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = MlpNet::from_layers(layers)?;
    if let Some((c, s)) = input_map {
        net = net.with_input_map(AffineMap::new(&c, &s)?)?;
    }
    if let Some((c, s)) = output_map {
        net = net.with_output_map(AffineMap::new(&c, &s)?)?;
    }
    Ok(net)
}

/// Serialises a model with provenance lines.
pub fn to_json(model: &ObserverModel, meta: &[(String, String)]) -> Result<String> {
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dims: model.dims,
        output: model.output.clone(),
        hyper: model.hyper.clone(),
        meta: meta.to_vec(),
        nets: model.nets().iter().map(|(n, net)| net_block(n, net)).collect(),
    };
    let mut s = serde_json::to_string_pretty(&manifest)?;
    s.push('\n');
    Ok(s)
}

/// Parses a manifest, verifying format, version and every checksum.
pub fn from_json(text: &str) -> Result<(ObserverModel, Vec<(String, String)>)> {
    let m: Manifest = serde_json::from_str(text)?;
    if m.format != FORMAT {
        return Err(Error::Archive(format!("unknown archive format {:?}", m.format)));
    }
    if m.version != VERSION {
        return Err(Error::Archive(format!("archive version {} is not supported (expected {VERSION})", m.version)));
    }
    let names = ["f_star", "g_l", "g_v", "l_hat_1", "l_hat_2"];
    if m.nets.len() != names.len() || m.nets.iter().zip(names).any(|(b, n)| b.name != n) {
        return Err(Error::Archive(format!("archive must hold the networks {names:?} in order")));
    }
    let mut nets = m.nets.iter().map(read_net);
    let model = ObserverModel {
        dims: m.dims,
        output: m.output,
        f_star: nets.next().unwrap()?,
        g_l: nets.next().unwrap()?,
        g_v: nets.next().unwrap()?,
        l_hat_1: nets.next().unwrap()?,
        l_hat_2: nets.next().unwrap()?,
        hyper: m.hyper,
    };
    model.validate()?;
    Ok((model, m.meta))
}

/// Writes `model.json` into `dir`, creating it if needed.
pub fn save_model(dir: &Path, model: &ObserverModel, meta: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MODEL_FILE), to_json(model, meta)?)?;
    Ok(())
}

/// Loads `model.json` from a directory, or the file itself if `path` is one.
pub fn load_model(path: &Path) -> Result<(ObserverModel, Vec<(String, String)>)> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    from_json(&std::fs::read_to_string(file)?)
}
