//! Bundle persistence: a textual manifest of tensor names/shapes followed by
//! a little-endian 32-bit-float payload in one file.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{AdversarialBundle, BundleConfig, GanError, GanMode, TargetModality};

const MAGIC: &str = "imputelab-checkpoint v1";

pub fn bundle_to_bytes(bundle: &AdversarialBundle) -> Vec<u8> {
    let cfg = &bundle.cfg;
    let mut manifest = String::new();
    writeln!(manifest, "{MAGIC}").unwrap();
    writeln!(manifest, "mode = {}", cfg.mode.as_str()).unwrap();
    writeln!(manifest, "target = {}", cfg.target.as_str()).unwrap();
    writeln!(manifest, "d_za = {}", cfg.d_za).unwrap();
    writeln!(manifest, "d_zb = {}", cfg.d_zb).unwrap();
    writeln!(manifest, "lambda_rec = {}", cfg.lambda_rec).unwrap();
    writeln!(manifest, "lambda_ce = {}", cfg.lambda_ce).unwrap();
    writeln!(manifest, "ablate_conditional = {}", u8::from(cfg.ablate_conditional)).unwrap();
    writeln!(manifest, "seed = {}", cfg.seed).unwrap();

    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    for (section, ps) in bundle.sections() {
        for (name, value) in ps.iter() {
            let shape: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(
                manifest,
                "tensor = {section}/{name} {} {offset}",
                shape.join("x")
            )
            .unwrap();
            for &v in value.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += value.len();
        }
    }
    writeln!(manifest, "blob = {offset}").unwrap();
    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(&payload);
    bytes
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<AdversarialBundle, GanError> {
    let err = |msg: String| GanError::Checkpoint(msg);
    let mut line_start = 0usize;
    let mut line_no = 0usize;
    let mut fields: std::collections::HashMap<String, String> = std::collections::HashMap::new();
    let mut tensors: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut blob_floats = None;
    let mut payload_start = 0usize;

    while line_start < bytes.len() {
        let rel = bytes[line_start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("manifest truncated".into()))?;
        let line = std::str::from_utf8(&bytes[line_start..line_start + rel])
            .map_err(|_| err("manifest not utf-8".into()))?;
        line_no += 1;
        line_start += rel + 1;
        if line_no == 1 {
            if line != MAGIC {
                return Err(err(format!("bad magic at line 1: {line:?}")));
            }
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| err(format!("line {line_no}: expected key = value")))?;
        match key {
            "tensor" => {
                let parts: Vec<&str> = value.split(' ').collect();
                if parts.len() != 3 {
                    return Err(err(format!("line {line_no}: bad tensor line")));
                }
                let shape: Vec<usize> = if parts[1].is_empty() {
                    vec![]
                } else {
                    parts[1]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| err(format!("line {line_no}: bad shape"))))
                        .collect::<Result<_, _>>()?
                };
                let off: usize = parts[2]
                    .parse()
                    .map_err(|_| err(format!("line {line_no}: bad offset")))?;
                tensors.push((parts[0].to_string(), shape, off));
            }
            "blob" => {
                blob_floats = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| err(format!("line {line_no}: bad blob size")))?,
                );
                payload_start = line_start;
                break;
            }
            other => {
                fields.insert(other.to_string(), value.to_string());
            }
        }
    }

    let blob_floats = blob_floats.ok_or_else(|| err("missing blob marker".into()))?;
    let payload = &bytes[payload_start..];
    if payload.len() != blob_floats * 4 {
        return Err(err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            blob_floats * 4
        )));
    }

    let get = |k: &str| -> Result<&String, GanError> {
        fields.get(k).ok_or_else(|| err(format!("missing field {k}")))
    };
    let cfg = BundleConfig {
        mode: GanMode::parse(get("mode")?).ok_or_else(|| err("bad mode".into()))?,
        target: TargetModality::parse(get("target")?).ok_or_else(|| err("bad target".into()))?,
        d_za: get("d_za")?.parse().map_err(|_| err("bad d_za".into()))?,
        d_zb: get("d_zb")?.parse().map_err(|_| err("bad d_zb".into()))?,
        lambda_rec: get("lambda_rec")?.parse().map_err(|_| err("bad lambda_rec".into()))?,
        lambda_ce: get("lambda_ce")?.parse().map_err(|_| err("bad lambda_ce".into()))?,
        ablate_conditional: get("ablate_conditional")? == "1",
        seed: get("seed")?.parse().map_err(|_| err("bad seed".into()))?,
    };
    let mut bundle = AdversarialBundle::init(cfg)?;

    for (path, shape, offset) in tensors {
        let (section, name) = path
            .split_once('/')
            .ok_or_else(|| err(format!("bad tensor path {path}")))?;
        let n: usize = shape.iter().product();
        if (offset + n) * 4 > payload.len() {
            return Err(err(format!("tensor {path} overruns payload")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = (offset + i) * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(raw));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|_| err(format!("tensor {path}: bad shape")))?;
        let ps = match section {
            "encoder_a" => &mut bundle.encoder_a,
            "encoder_b" => &mut bundle.encoder_b,
            "decoder_a" => &mut bundle.decoder_a,
            "discriminator" => &mut bundle.discriminator,
            "classifier" => &mut bundle.classifier,
            other => return Err(err(format!("unknown section {other}"))),
        };
        let slot = ps
            .get_mut(name)
            .ok_or_else(|| err(format!("unknown tensor {path}")))?;
        if slot.shape() != arr.shape() {
            return Err(err(format!(
                "tensor {path}: shape {:?} does not match architecture {:?}",
                arr.shape(),
                slot.shape()
            )));
        }
        *slot = arr;
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &AdversarialBundle, path: &Path) -> Result<(), GanError> {
    std::fs::write(path, bundle_to_bytes(bundle))
        .map_err(|e| GanError::Checkpoint(format!("write {}: {e}", path.display())))
}

pub fn load_bundle(path: &Path) -> Result<AdversarialBundle, GanError> {
    let bytes = std::fs::read(path)
        .map_err(|e| GanError::Checkpoint(format!("read {}: {e}", path.display())))?;
    bundle_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::BundleConfig;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Cpbigan,
            TargetModality::Factors,
            13,
        ))
        .unwrap();
        // mutate a tensor so the round trip is not just the init state
        bundle.decoder_a.get_mut("dec_a.l4.b").unwrap().fill(0.25);
        let bytes = bundle_to_bytes(&bundle);
        let loaded = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.cfg, bundle.cfg);
        for (orig, load) in bundle.sections().iter().zip(loaded.sections().iter()) {
            assert_eq!(orig.0, load.0);
            for (name, value) in orig.1.iter() {
                assert_eq!(load.1.get(name).unwrap(), value, "tensor {name}");
            }
        }
        // byte-identical re-serialization
        assert_eq!(bytes, bundle_to_bytes(&loaded));
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Pbigan,
            TargetModality::ImageTp1,
            3,
        ))
        .unwrap();
        let mut bytes = bundle_to_bytes(&bundle);
        bytes.truncate(bytes.len() - 3);
        assert!(bundle_from_bytes(&bytes).is_err());
    }
}
