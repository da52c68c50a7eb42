//! Binary checkpoint: `"XINR"`, `u32` version, `u64` header length, a JSON
//! header, then little-endian `f32` tensor payloads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use super::domain::DomainSpec;
use super::grid::{FeatureGrid, Structure};
use super::model::{ExplorableModel, FeatureStore, Linear, MlpDecoder};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: [u8; 4] = *b"XINR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in floats from the start of the payload section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    domain: DomainSpec,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(model: &ExplorableModel) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for g in model.features.structures() {
        out.push((g.structure().name(), g.shape(), g.values()));
    }
    for (k, l) in model.decoder.layers.iter().enumerate() {
        out.push((format!("decoder.{k}.weight"), vec![l.outputs, l.inputs], &l.weight[..]));
        out.push((format!("decoder.{k}.bias"), vec![l.outputs], &l.bias[..]));
    }
    out
}

pub fn to_bytes(model: &ExplorableModel) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += data.len();
    }
    let header = serde_json::to_vec(&Header {
        arch: model.arch.clone(),
        domain: model.domain.clone(),
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, data) in &tensors {
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(model: &ExplorableModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ExplorableModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| CheckpointError::Truncated(format!("missing {what} ({n} bytes at offset {at})")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ExplorableModel> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("file shorter than the magic bytes".into()).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, supported: VERSION }.into());
    }
    let hlen = u64::from_le_bytes(take(bytes, 8, 8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(bytes, 16, hlen, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[16 + hlen..];

    let template = ExplorableModel::new(header.arch.clone(), header.domain.clone(), 0)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let expected = named_tensors(&template);
    let found: std::collections::HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();

    let mut loaded: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (name, shape, _) in &expected {
        let entry = found
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::Header(format!("missing tensor `{name}`")))?;
        if &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: entry.shape.clone(),
                expected: shape.clone(),
            }
            .into());
        }
        let n: usize = shape.iter().product();
        let raw = take(payload, entry.offset * 4, n * 4, &format!("payload of `{name}`"))?;
        loaded.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::Header(format!(
            "{} tensors stored, the architecture uses {}",
            header.tensors.len(),
            expected.len()
        ))
        .into());
    }

    let mut it = loaded.into_iter();
    let rebuild = |g: &FeatureGrid, data: Vec<f32>| -> Result<FeatureGrid> {
        FeatureGrid::new(g.structure(), g.res(), g.channels(), data)
    };
    let mut spatial = Vec::new();
    for g in &template.features.spatial {
        spatial.push(rebuild(g, it.next().expect("counted"))?);
    }
    let mut lines = Vec::new();
    for g in &template.features.lines {
        debug_assert!(matches!(g.structure(), Structure::Line(_)));
        lines.push(rebuild(g, it.next().expect("counted"))?);
    }
    let mut layers = Vec::new();
    for l in &template.decoder.layers {
        let weight = it.next().expect("counted");
        let bias = it.next().expect("counted");
        layers.push(Linear { inputs: l.inputs, outputs: l.outputs, weight, bias });
    }
    Ok(ExplorableModel {
        arch: header.arch,
        features: FeatureStore { spatial, lines },
        decoder: MlpDecoder { layers },
        domain: header.domain,
    })
}

/// Checks a file's magic and version without decoding it.
pub fn probe(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(CheckpointError::Truncated("short file".into())));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic { found: bytes[..4].try_into().expect("4 bytes") }.into());
    }
    Ok(u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::arch::SpatialVariant;
    use crate::field::model::test_support::*;

    fn model(variant: SpatialVariant) -> ExplorableModel {
        let a = ArchConfig { spatial_variant: variant, ..tiny_arch(2) };
        let mut m = ExplorableModel::new(a, unit_domain(2), 3).unwrap();
        randomize(&mut m, 44, -1.0, 1.0);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in [SpatialVariant::Hybrid, SpatialVariant::GridOnly, SpatialVariant::PlanesOnly] {
            let m = model(v);
            let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
            assert_eq!(back, m);
            let x = [0.1, -0.4, 0.77];
            assert_eq!(
                back.forward(x, &[0.2, -0.9]).unwrap().to_bits(),
                m.forward(x, &[0.2, -0.9]).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn only_participating_structures_are_stored() {
        let bytes = to_bytes(&model(SpatialVariant::GridOnly)).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert!(header.tensors.iter().all(|t| !t.name.starts_with("plane")));
    }

    #[test]
    fn bad_magic() {
        let mut b = to_bytes(&model(SpatialVariant::Hybrid)).unwrap();
        b[0] = b'Y';
        assert!(matches!(from_bytes(&b), Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))));
    }

    #[test]
    fn version_mismatch() {
        let mut b = to_bytes(&model(SpatialVariant::Hybrid)).unwrap();
        b[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&b),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 7, .. }))
        ));
    }

    #[test]
    fn truncated_payload() {
        let b = to_bytes(&model(SpatialVariant::Hybrid)).unwrap();
        for cut in [2, 10, 20, b.len() - 3] {
            assert!(matches!(
                from_bytes(&b[..cut]),
                Err(Error::Checkpoint(CheckpointError::Truncated(_)))
            ));
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let m = model(SpatialVariant::Hybrid);
        let b = to_bytes(&m).unwrap();
        let hlen = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&b[16..16 + hlen]).unwrap();
        header.tensors[1].shape = vec![5, 5, 4];
        let hj = serde_json::to_vec(&header).unwrap();
        let mut out = b[..8].to_vec();
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend_from_slice(&hj);
        out.extend_from_slice(&b[16 + hlen..]);
        match from_bytes(&out) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => assert_eq!(name, "plane_xy"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
