//! Binary checkpoints.
//!
//! Layout (little endian): `FPCK`, `u32` version, `u32` header length, a JSON
//! header `{kind, meta, tensors: [{name, shape}]}`, then each tensor's `f64`
//! values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::critic::Critic;
use crate::error::{Error, Result};
use crate::model::{GenerativeModel, ModelConfig};
use crate::numerics::{FourierFeatures, Mlp, Tensor};

const MAGIC: &[u8; 4] = b"FPCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor '{name}'")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = Header {
        kind: ckpt.kind.clone(),
        meta: ckpt.meta.clone(),
        tensors: ckpt.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut input = BufReader::new(input);
    let truncated = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    };
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(truncated)?;
    if &word != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    input.read_exact(&mut word).map_err(truncated)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    input.read_exact(&mut word).map_err(truncated)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut json).map_err(truncated)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(Checkpoint { kind: header.kind, meta: header.meta, tensors })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(File::create(path)?, ckpt)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(File::open(path)?)
}

fn mlp_tensors(prefix: &str, net: &Mlp) -> Vec<(String, Tensor)> {
    net.params().iter().enumerate().map(|(i, p)| (format!("{prefix}.{i}"), p.clone())).collect()
}

fn mlp_from(ckpt: &Checkpoint, prefix: &str, sizes: Vec<usize>, activation: crate::numerics::Activation) -> Result<Mlp> {
    let params = (0..2 * (sizes.len().saturating_sub(1)))
        .map(|i| ckpt.tensor(&format!("{prefix}.{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_parts(sizes, activation, params)
}

/// Model checkpoint; `extra` is stored verbatim under `meta.extra`.
pub fn model_checkpoint(model: &GenerativeModel, extra: Value) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "config": model.config(),
        "x_dim": model.x_dim(),
        "cond_dim": model.cond_dim(),
        "sizes": model.net().sizes(),
        "extra": extra,
    });
    let mut tensors = vec![("time_freqs".to_string(), Tensor::column(model.embed().freqs().to_vec()))];
    tensors.extend(mlp_tensors("net", model.net()));
    Ok(Checkpoint { kind: "generative_model".into(), meta, tensors })
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<GenerativeModel> {
    ckpt.expect_kind("generative_model")?;
    let config: ModelConfig = ckpt.field("config")?;
    let sizes: Vec<usize> = ckpt.field("sizes")?;
    let net = mlp_from(ckpt, "net", sizes, config.activation)?;
    let embed = FourierFeatures::from_freqs(ckpt.tensor("time_freqs")?.data().to_vec());
    GenerativeModel::from_parts(config, ckpt.field("x_dim")?, ckpt.field("cond_dim")?, embed, net)
}

pub fn critic_checkpoint(critic: &Critic, extra: Value) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "tau": critic.tau(),
        "gamma": critic.gamma(),
        "activation": critic.q_net().activation(),
        "q_sizes": critic.q_net().sizes(),
        "v_sizes": critic.v_net().sizes(),
        "extra": extra,
    });
    let mut tensors = mlp_tensors("q", critic.q_net());
    tensors.extend(mlp_tensors("v", critic.v_net()));
    Ok(Checkpoint { kind: "critic".into(), meta, tensors })
}

pub fn critic_from_checkpoint(ckpt: &Checkpoint) -> Result<Critic> {
    ckpt.expect_kind("critic")?;
    let act = ckpt.field("activation")?;
    let q = mlp_from(ckpt, "q", ckpt.field("q_sizes")?, act)?;
    let v = mlp_from(ckpt, "v", ckpt.field("v_sizes")?, act)?;
    Critic::from_parts(q, v, ckpt.field("tau")?, ckpt.field("gamma")?)
}
