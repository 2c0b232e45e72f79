//! Checkpoint container.
//!
//! ```text
//! DCMCKPT1
//! [config]
//! key=value            model configuration
//! [meta]
//! key=value            free-form run settings
//! [tensors]
//! name dims offset     dims like 4x8, offset in bytes into the payload
//! [data]
//! <little-endian f32 payload>
//! ```

use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::kv::{format_kv, parse_kv};
use crate::model::{DcMamber, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "DCMCKPT1";
const DATA_MARKER: &str = "\n[data]\n";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Settings recorded alongside the model, such as the training config.
    pub meta: Vec<(String, String)>,
    pub params: ParamStore<f32>,
    pub norm: Option<NormStats>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn model(&self) -> Result<DcMamber> {
        DcMamber::from_store(self.config.clone(), &self.params)
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(&str, &Tensor<f32>)> = ckpt.params.iter().collect();
    if let Some(norm) = &ckpt.norm {
        tensors.push((NORM_MEAN, &norm.mean));
        tensors.push((NORM_STD, &norm.std));
    }
    let mut head = format!("{MAGIC}\n[config]\n");
    head.push_str(&format_kv(ckpt.config.to_kv()));
    head.push_str("[meta]\n");
    head.push_str(&format_kv(ckpt.meta.iter().map(|(k, v)| (k, v))));
    head.push_str("[tensors]\n");
    let mut offset = 0usize;
    for (name, t) in &tensors {
        head.push_str(&format!("{name} {} {offset}\n", dims(t.shape())));
        offset += 4 * t.numel();
    }
    head.push_str("[data]\n");
    let mut out = head.into_bytes();
    out.reserve(offset);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let shape = s
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension {d:?} in {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(bad(format!("zero dimension in {s:?}")));
    }
    Ok(shape)
}

/// Decodes and validates a checkpoint: every tensor must exist with the
/// shape the stored config implies.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let split = bytes
        .windows(DATA_MARKER.len())
        .position(|w| w == DATA_MARKER.as_bytes())
        .ok_or_else(|| bad("missing [data] section"))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[split + DATA_MARKER.len()..];

    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut section = "";
    let (mut config, mut meta, mut manifest) = (String::new(), String::new(), Vec::new());
    for line in lines {
        match line {
            "[config]" | "[meta]" | "[tensors]" => {
                let order = ["", "[config]", "[meta]", "[tensors]"];
                let (prev, next) = (
                    order.iter().position(|s| *s == section).unwrap(),
                    order.iter().position(|s| *s == line).unwrap(),
                );
                if next != prev + 1 {
                    return Err(bad(format!("section {line} out of order")));
                }
                section = order[next];
            }
            _ => match section {
                "[config]" => {
                    config.push_str(line);
                    config.push('\n');
                }
                "[meta]" => {
                    meta.push_str(line);
                    meta.push('\n');
                }
                "[tensors]" => manifest.push(line),
                _ => return Err(bad(format!("content before [config]: {line:?}"))),
            },
        }
    }
    if section != "[tensors]" {
        return Err(bad("missing header sections"));
    }
    let config_entries = parse_kv(&config)?;
    let config = ModelConfig::from_kv(config_entries.iter().map(|e| (e.key.as_str(), e.value.as_str())))?;
    let meta = parse_kv(&meta)?
        .into_iter()
        .map(|e| (e.key, e.value))
        .collect();

    let mut params = ParamStore::new();
    let (mut mean, mut std) = (None, None);
    let mut expected_offset = 0usize;
    for line in manifest {
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad(format!("malformed manifest line {line:?}")));
        };
        let shape = parse_dims(shape)?;
        let offset: usize = offset
            .parse()
            .map_err(|_| bad(format!("bad offset in {line:?}")))?;
        if offset != expected_offset {
            return Err(bad(format!("tensor {name} at offset {offset}, expected {expected_offset}")));
        }
        let bytes_len = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("tensor {name} too large")))?;
        let end = offset
            .checked_add(bytes_len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
        let data: Vec<f32> = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)?;
        if !tensor.is_finite() {
            return Err(bad(format!("tensor {name} holds non-finite values")));
        }
        expected_offset = end;
        match name {
            NORM_MEAN => mean = Some(tensor),
            NORM_STD => std = Some(tensor),
            _ => {
                if params.find(name).is_some() {
                    return Err(bad(format!("duplicate tensor {name}")));
                }
                params.add(name, tensor);
            }
        }
    }
    if expected_offset != payload.len() {
        return Err(bad(format!(
            "payload has {} bytes, manifest covers {expected_offset}",
            payload.len()
        )));
    }
    let norm = match (mean, std) {
        (None, None) => None,
        (Some(mean), Some(std)) => Some(NormStats::new(mean, std)?),
        _ => return Err(bad("normalization statistics incomplete")),
    };
    if let Some(n) = &norm {
        if n.vars() != config.n_vars {
            return Err(bad(format!(
                "normalization covers {} variables, config has {}",
                n.vars(),
                config.n_vars
            )));
        }
    }
    DcMamber::from_store(config.clone(), &params)?;
    Ok(Checkpoint {
        config,
        meta,
        params,
        norm,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::new(8, 4, 3).with_width(8);
        let (_, params) = DcMamber::new::<f32>(cfg.clone(), 1).unwrap();
        Checkpoint {
            config: cfg,
            meta: vec![("lr".into(), "0.0001".into())],
            params,
            norm: Some(NormStats::new(Tensor::from_f64(&[3], &[0.5, 1.0, -2.0]).unwrap(), Tensor::full(&[3], 2.0)).unwrap()),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.meta("lr"), Some("0.0001"));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let c = sample();
        let mut bytes = encode_checkpoint(&c);
        // grow the lookback: every shape that depends on it now disagrees
        let at = bytes.windows(10).position(|w| w == b"lookback=8").unwrap();
        bytes[at + 9] = b'9';
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"hello").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
