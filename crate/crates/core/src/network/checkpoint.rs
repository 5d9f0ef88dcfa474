//! Checkpoint directory: `manifest.json` plus raw little-endian `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{topology, LayerSpec};
use super::{NetConfig, Network};
use crate::error::{Error, Result};
use crate::kernel::{BnStats, Tensor};

pub const CHECKPOINT_VERSION: &str = "intent-ckpt-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    config: NetConfig,
    layers: Vec<LayerDescriptor>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct LayerDescriptor {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    params: Vec<ParamDescriptor>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ParamDescriptor {
    name: String,
    shape: Vec<usize>,
}

impl ParamDescriptor {
    fn new(name: &str, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn descriptor(spec: &LayerSpec, eps: f32) -> LayerDescriptor {
    match spec {
        LayerSpec::Conv {
            name,
            in_channels,
            out_channels,
            kernel,
            padding,
        } => LayerDescriptor {
            name: name.clone(),
            kind: "conv2d".into(),
            stride: Some(1),
            padding: Some(*padding),
            eps: None,
            params: vec![
                ParamDescriptor::new("weight", vec![*out_channels, *in_channels, *kernel, *kernel]),
                ParamDescriptor::new("bias", vec![*out_channels]),
            ],
        },
        LayerSpec::BatchNorm { name, channels } => LayerDescriptor {
            name: name.clone(),
            kind: "batchnorm".into(),
            stride: None,
            padding: None,
            eps: Some(eps),
            params: ["gamma", "beta", "tracked_mean", "tracked_var"]
                .iter()
                .map(|p| ParamDescriptor::new(p, vec![*channels]))
                .collect(),
        },
    }
}

/// Serialized manifest text and weight bytes.
pub fn to_bytes(net: &Network) -> Result<(String, Vec<u8>)> {
    let mut convs = net.conv_layers().iter();
    let mut bns = net.bn_layers().iter();
    let mut layers = Vec::new();
    let mut blob: Vec<f32> = Vec::with_capacity(net.parameter_count());
    for spec in topology(net.config()) {
        match &spec {
            LayerSpec::Conv { .. } => {
                let c = convs.next().expect("conv count matches topology");
                blob.extend_from_slice(c.weight.data());
                blob.extend_from_slice(&c.bias);
                layers.push(descriptor(&spec, 0.0));
            }
            LayerSpec::BatchNorm { .. } => {
                let b = bns.next().expect("bn count matches topology");
                blob.extend_from_slice(&b.gamma);
                blob.extend_from_slice(&b.beta);
                blob.extend_from_slice(&b.tracked.mean);
                blob.extend_from_slice(&b.tracked.var);
                layers.push(descriptor(&spec, b.eps));
            }
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.into(),
        config: *net.config(),
        layers,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
    let bytes = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok((text, bytes))
}

pub fn save(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = to_bytes(net)?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Network> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    from_bytes(&text, &blob)
}

pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Network> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    let manifest: Manifest =
        serde_json::from_str(manifest).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "version {:?}, expected {CHECKPOINT_VERSION:?}",
            manifest.version
        )));
    }
    manifest
        .config
        .validate()
        .map_err(|e| corrupt(format!("config: {e}")))?;
    if let Some(bad) = manifest
        .layers
        .iter()
        .find(|l| l.kind != "conv2d" && l.kind != "batchnorm")
    {
        return Err(corrupt(format!("unknown layer type {:?} for {}", bad.kind, bad.name)));
    }
    let expected = topology(&manifest.config);
    if expected.len() != manifest.layers.len() {
        return Err(corrupt(format!(
            "{} layers declared, topology has {}",
            manifest.layers.len(),
            expected.len()
        )));
    }
    let declared: usize = manifest
        .layers
        .iter()
        .flat_map(|l| &l.params)
        .map(ParamDescriptor::count)
        .sum();
    if blob.len() != declared * 4 {
        return Err(corrupt(format!(
            "weights hold {} bytes, manifest declares {} f32 values",
            blob.len(),
            declared
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut net = Network::empty(manifest.config);
    let mut offset = 0usize;
    let mut take = |n: usize| -> Vec<f32> {
        let out = values[offset..offset + n].to_vec();
        offset += n;
        out
    };
    for (spec, layer) in expected.iter().zip(&manifest.layers) {
        let eps = layer.eps.unwrap_or(0.0);
        let want = descriptor(spec, eps);
        if want.name != layer.name || want.kind != layer.kind || want.params != layer.params {
            return Err(corrupt(format!(
                "layer {:?} ({}) does not match the configured topology at {:?}",
                layer.name,
                layer.kind,
                spec.name()
            )));
        }
        match spec {
            LayerSpec::Conv {
                name,
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                if layer.padding != Some(*padding) || layer.stride != Some(1) {
                    return Err(corrupt(format!("layer {name}: unexpected stride/padding")));
                }
                let shape = vec![*out_channels, *in_channels, *kernel, *kernel];
                let weight = Tensor::new(shape.clone(), take(shape.iter().product()))?;
                let bias = take(*out_channels);
                net.push_conv(name.clone(), weight, bias, *padding);
            }
            LayerSpec::BatchNorm { name, channels } => {
                if !(eps > 0.0) {
                    return Err(corrupt(format!("layer {name}: eps must be positive")));
                }
                let gamma = take(*channels);
                let beta = take(*channels);
                let mean = take(*channels);
                let var = take(*channels);
                let tracked = BnStats::new(mean, var)
                    .map_err(|e| corrupt(format!("layer {name}: {e}")))?;
                net.push_bn(name.clone(), gamma, beta, tracked, eps);
            }
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Network {
        Network::build(NetConfig { depth: 2, base_width: 4, ..Default::default() }, 17).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut net = small();
        net.bn_layers_mut()[0].tracked = BnStats::new(vec![0.1, -2.5, 3.0, 1e-7], vec![0.3, 1.0, 7.5, 0.0])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&net, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&net).unwrap());
        assert_eq!(back, net);
    }

    #[test]
    fn manifest_field_order_and_version() {
        let (text, _) = to_bytes(&small()).unwrap();
        let v = text.find("\"version\"").unwrap();
        let c = text.find("\"config\"").unwrap();
        let l = text.find("\"layers\"").unwrap();
        assert!(v < c && c < l);
        assert!(text.contains(CHECKPOINT_VERSION));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (text, blob) = to_bytes(&small()).unwrap();
        let err = from_bytes(&text, &blob[..blob.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)));
        let err = from_bytes(&text, &blob[..blob.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)));
    }

    #[test]
    fn unknown_layer_type_is_rejected() {
        let (text, blob) = to_bytes(&small()).unwrap();
        let bad = text.replacen("\"batchnorm\"", "\"groupnorm\"", 1);
        assert!(matches!(from_bytes(&bad, &blob), Err(Error::CorruptCheckpoint(_))));
        let bad = text.replace(CHECKPOINT_VERSION, "intent-ckpt-0");
        assert!(matches!(from_bytes(&bad, &blob), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn different_seeds_differ_bytewise() {
        let a = to_bytes(&Network::build(NetConfig::default(), 1).unwrap()).unwrap();
        let b = to_bytes(&Network::build(NetConfig::default(), 2).unwrap()).unwrap();
        assert_eq!(a.0, b.0);
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn missing_directory() {
        let err = load(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingPath(_)));
    }
}
