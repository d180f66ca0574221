//! JSON checkpoints with float32 weights stored as 9-significant-digit decimal
//! strings, which round-trip bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::NetsConfig;
use crate::error::{Error, Result};
use crate::nn::{Layer, LatentModel, MlpParams, MlpSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const ACTIVATION: &str = "tanh";
const NETS: [&str; 3] = ["encoder", "decoder", "latent"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub seed: u64,
    pub phase: usize,
    pub epoch: usize,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weight: Vec<Vec<String>>,
    bias: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRecord {
    dims: Vec<usize>,
    activation: String,
    layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    meta: CheckpointMeta,
    nets: BTreeMap<String, NetRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: LatentModel,
}

fn encode(v: f32) -> String {
    format!("{v:.8e}")
}

fn net_record(net: &MlpParams) -> NetRecord {
    NetRecord {
        dims: net.spec().dims().to_vec(),
        activation: ACTIVATION.to_string(),
        layers: net
            .layers()
            .iter()
            .map(|l| {
                let cols = l.weight.shape()[1];
                LayerRecord {
                    weight: l.weight.data().chunks(cols).map(|row| row.iter().map(|&v| encode(v)).collect()).collect(),
                    bias: l.bias.data().iter().map(|&v| encode(v)).collect(),
                }
            })
            .collect(),
    }
}

fn decode_net(origin: &Path, name: &str, rec: &NetRecord) -> Result<MlpParams> {
    let bad = |msg: String| Error::validation(format!("{name}: {msg}"));
    if rec.activation != ACTIVATION {
        return Err(bad(format!("unsupported activation {:?}", rec.activation)));
    }
    let spec = MlpSpec::new(rec.dims.clone()).map_err(|e| bad(e.to_string()))?;
    if rec.layers.len() != spec.num_layers() {
        return Err(bad(format!("dims {:?} need {} layers, found {}", rec.dims, spec.num_layers(), rec.layers.len())));
    }
    let mut layers = Vec::with_capacity(rec.layers.len());
    for (k, (lr, w)) in rec.layers.iter().zip(rec.dims.windows(2)).enumerate() {
        let num = |s: &String, what: &str| -> Result<f32> {
            s.trim().parse::<f32>().map_err(|_| {
                Error::parse(origin, format!("{name} layer {k}: {what} entry {s:?} is not a number"))
            })
        };
        let (fan_in, fan_out) = (w[0], w[1]);
        if lr.weight.len() != fan_out || lr.weight.iter().any(|r| r.len() != fan_in) || lr.bias.len() != fan_out {
            return Err(bad(format!("layer {k} does not match widths {fan_in} -> {fan_out}")));
        }
        let weight = lr.weight.iter().flatten().map(|s| num(s, "weight")).collect::<Result<Vec<_>>>()?;
        let bias = lr.bias.iter().map(|s| num(s, "bias")).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weight: Tensor::matrix(fan_out, fan_in, weight)?,
            bias: Tensor::vector(bias),
        });
    }
    MlpParams::from_layers(spec, layers).map_err(|e| bad(e.to_string()))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            meta: self.meta.clone(),
            nets: NETS
                .iter()
                .zip([&self.model.encoder, &self.model.decoder, &self.model.latent])
                .map(|(n, net)| (n.to_string(), net_record(net)))
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if file.meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::validation(format!(
                "{}: checkpoint format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                origin.display(),
                file.meta.format_version
            )));
        }
        let mut nets = Vec::with_capacity(3);
        for name in NETS {
            let rec = file
                .nets
                .get(name)
                .ok_or_else(|| Error::validation(format!("{}: missing net {name}", origin.display())))?;
            nets.push(decode_net(origin, name, rec)?);
        }
        if let Some(extra) = file.nets.keys().find(|k| !NETS.contains(&k.as_str())) {
            return Err(Error::validation(format!("{}: unknown net {extra}", origin.display())));
        }
        let latent = nets.pop().expect("three nets");
        let decoder = nets.pop().expect("three nets");
        let encoder = nets.pop().expect("three nets");
        let model = LatentModel { encoder, decoder, latent };
        model.validate_shapes()?;
        Ok(Checkpoint { meta: file.meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Rejects a checkpoint whose architecture differs from `nets`.
    pub fn check_architecture(&self, nets: &NetsConfig) -> Result<()> {
        for (name, have, want) in [
            ("encoder", self.model.encoder.spec(), &nets.encoder),
            ("decoder", self.model.decoder.spec(), &nets.decoder),
            ("latent", self.model.latent.spec(), &nets.latent),
        ] {
            if have != want {
                return Err(Error::validation(format!(
                    "{name} dims {:?} in checkpoint, configuration expects {:?}",
                    have.dims(),
                    want.dims()
                )));
            }
        }
        Ok(())
    }
}
