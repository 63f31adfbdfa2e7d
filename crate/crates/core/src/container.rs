//! The `SSLF` model container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SSLF` |
//! | 2 | format version |
//! | 8 | header length `h` |
//! | h | JSON header |
//! | 8 | number of reals `n` |
//! | 8·n | IEEE-754 binary64 reals |
//! | 4 | CRC-32 of everything between the version and the checksum |
//!
//! The header describes the model and points into the real array with
//! `(offset, len)` spans.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::classify::{Classifier, Hyper, LinearModel, MinMaxScaler, ModelKind, Submodel, VerificationModel};
use crate::pairfeat::{ChannelStats, FeatureLayout};
use crate::pixelhop::{HopNode, HopUnit, NodeId, NodeStatus, PixelHopConfig, PixelHopModel, UnitInput, LEVELS};
use crate::preprocess::PreprocessConfig;
use crate::saab::SaabKernelBank;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SSLF";
pub const FORMAT_VERSION: u16 = 1;

const PREFIX: usize = 4 + 2 + 8;

/// Frame a header and real array into container bytes.
pub fn encode<H: Serialize>(header: &H, reals: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + 8 + 8 * reals.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(reals.len() as u64).to_le_bytes());
    for v in reals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[6..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Validate and split container bytes. The version is checked first so that
/// files from newer writers fail with a version error rather than a checksum
/// error.
pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if bytes.len() < 6 || bytes[..4] != MAGIC {
        return Err(Error::Corrupt("not an SSLF container".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, supported: FORMAT_VERSION });
    }
    if bytes.len() < PREFIX + 8 + 4 {
        return Err(Error::Corrupt("truncated container".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[6..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let read_u64 = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| Error::Corrupt("truncated container".into()))
    };
    let header_len = read_u64(6)?;
    let header_end = PREFIX.checked_add(header_len).filter(|&e| e + 8 <= body_end);
    let header_end = header_end.ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
    let header: H = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let n = read_u64(header_end)?;
    let data = &bytes[header_end + 8..body_end];
    if n.checked_mul(8) != Some(data.len()) {
        return Err(Error::Corrupt(format!("expected {n} reals, found {} bytes", data.len())));
    }
    let reals = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, reals))
}

/// `(offset, len)` into the real array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

#[derive(Default)]
struct Writer {
    reals: Vec<f64>,
}

impl Writer {
    fn put(&mut self, values: &[f64]) -> Span {
        let span = Span { offset: self.reals.len(), len: values.len() };
        self.reals.extend_from_slice(values);
        span
    }
}

struct Reader<'a> {
    reals: &'a [f64],
}

impl Reader<'_> {
    fn get(&self, span: Span) -> Result<Vec<f64>> {
        span.offset
            .checked_add(span.len)
            .and_then(|end| self.reals.get(span.offset..end))
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Corrupt(format!("span {span:?} outside the real array")))
    }

    fn scalar(&self, span: Span) -> Result<f64> {
        match self.get(span)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Corrupt("expected a single real".into())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    patch_dim: usize,
    n_kept: usize,
    kernels: Span,
    eigenvalues: Span,
    dc_energy_raw: Span,
    bias: Span,
    deficient_slots: usize,
}

#[derive(Serialize, Deserialize)]
struct UnitHeader {
    level: usize,
    input: UnitInput,
    first_node: usize,
    node_count: usize,
    bank: BankHeader,
}

#[derive(Serialize, Deserialize)]
struct NodeHeader {
    id: NodeId,
    unit: usize,
    kernel: usize,
    status: NodeStatus,
}

#[derive(Serialize, Deserialize)]
struct HopHeader {
    config: PixelHopConfig,
    units: Vec<UnitHeader>,
    nodes: Vec<Vec<NodeHeader>>,
    /// (e_init, e_norm) per node, level by level.
    node_energies: Span,
}

fn write_hop(w: &mut Writer, m: &PixelHopModel) -> HopHeader {
    let units = m
        .units
        .iter()
        .map(|u| {
            let flat: Vec<f64> = u.bank.kernels.iter().flatten().copied().collect();
            UnitHeader {
                level: u.level,
                input: u.input.clone(),
                first_node: u.first_node,
                node_count: u.node_count,
                bank: BankHeader {
                    patch_dim: u.bank.patch_dim,
                    n_kept: u.bank.n_kept(),
                    kernels: w.put(&flat),
                    eigenvalues: w.put(&u.bank.eigenvalues),
                    dc_energy_raw: w.put(&[u.bank.dc_energy_raw]),
                    bias: w.put(&[u.bank.bias]),
                    deficient_slots: u.bank.deficient_slots,
                },
            }
        })
        .collect();
    let energies: Vec<f64> = m.levels.iter().flatten().flat_map(|n| [n.e_init, n.e_norm]).collect();
    HopHeader {
        config: m.config.clone(),
        units,
        nodes: m
            .levels
            .iter()
            .map(|lv| {
                lv.iter()
                    .map(|n| NodeHeader { id: n.id.clone(), unit: n.unit, kernel: n.kernel, status: n.status })
                    .collect()
            })
            .collect(),
        node_energies: w.put(&energies),
    }
}

fn read_hop(r: &Reader, h: HopHeader) -> Result<PixelHopModel> {
    let mut units = Vec::with_capacity(h.units.len());
    for u in h.units {
        let b = &u.bank;
        let flat = r.get(b.kernels)?;
        if b.patch_dim == 0 || flat.len() != b.patch_dim * b.n_kept {
            return Err(Error::Corrupt("kernel array does not match its shape".into()));
        }
        let bank = SaabKernelBank {
            patch_dim: b.patch_dim,
            kernels: flat.chunks_exact(b.patch_dim).map(<[f64]>::to_vec).collect(),
            eigenvalues: r.get(b.eigenvalues)?,
            dc_energy_raw: r.scalar(b.dc_energy_raw)?,
            bias: r.scalar(b.bias)?,
            deficient_slots: b.deficient_slots,
        };
        units.push(HopUnit { level: u.level, input: u.input, bank, first_node: u.first_node, node_count: u.node_count });
    }
    if h.nodes.len() != LEVELS {
        return Err(Error::Corrupt(format!("expected {LEVELS} node levels, found {}", h.nodes.len())));
    }
    let energies = r.get(h.node_energies)?;
    let total: usize = h.nodes.iter().map(Vec::len).sum();
    if energies.len() != 2 * total {
        return Err(Error::Corrupt("node energy array does not match the node count".into()));
    }
    let mut e = energies.chunks_exact(2);
    let mut levels: [Vec<HopNode>; LEVELS] = Default::default();
    for (slot, nodes) in levels.iter_mut().zip(h.nodes) {
        for n in nodes {
            let pair = e.next().expect("length checked");
            if n.unit >= units.len() {
                return Err(Error::Corrupt(format!("node {} refers to a missing unit", n.id)));
            }
            slot.push(HopNode {
                level: n.id.level(),
                id: n.id,
                unit: n.unit,
                kernel: n.kernel,
                e_init: pair[0],
                e_norm: pair[1],
                status: n.status,
            });
        }
    }
    Ok(PixelHopModel { config: h.config, units, levels })
}

#[derive(Serialize, Deserialize)]
struct LinearHeader {
    kind: ModelKind,
    hyper: Hyper,
    weights: Span,
    bias: Span,
}

fn write_linear(w: &mut Writer, m: &LinearModel) -> LinearHeader {
    LinearHeader { kind: m.kind, hyper: m.hyper, weights: w.put(&m.weights), bias: w.put(&[m.bias]) }
}

fn read_linear(r: &Reader, h: LinearHeader) -> Result<LinearModel> {
    Ok(LinearModel { kind: h.kind, hyper: h.hyper, weights: r.get(h.weights)?, bias: r.scalar(h.bias)? })
}

#[derive(Serialize, Deserialize)]
struct SubmodelHeader {
    hop: HopHeader,
    stats_counts: [usize; LEVELS],
    stats_mean: Span,
    stats_std: Span,
    layout: FeatureLayout,
    scaler_min: Span,
    scaler_max: Span,
    classifier: LinearHeader,
}

fn write_submodel(w: &mut Writer, s: &Submodel) -> SubmodelHeader {
    SubmodelHeader {
        hop: write_hop(w, &s.hop),
        stats_counts: s.stats.counts,
        stats_mean: w.put(&s.stats.mean),
        stats_std: w.put(&s.stats.std),
        layout: s.layout.clone(),
        scaler_min: w.put(&s.classifier.scaler.min),
        scaler_max: w.put(&s.classifier.scaler.max),
        classifier: write_linear(w, &s.classifier.model),
    }
}

fn read_submodel(r: &Reader, h: SubmodelHeader) -> Result<Submodel> {
    let sub = Submodel {
        hop: read_hop(r, h.hop)?,
        stats: ChannelStats { mean: r.get(h.stats_mean)?, std: r.get(h.stats_std)?, counts: h.stats_counts },
        layout: h.layout,
        classifier: Classifier {
            scaler: MinMaxScaler { min: r.get(h.scaler_min)?, max: r.get(h.scaler_max)? },
            model: read_linear(r, h.classifier)?,
        },
    };
    let dim = sub.layout.dim();
    if sub.hop.level_counts() != sub.layout.counts
        || sub.stats.counts != sub.layout.counts
        || sub.classifier.model.dim() != dim
        || sub.classifier.scaler.dim() != dim
    {
        return Err(Error::Corrupt("submodel components disagree on node counts".into()));
    }
    Ok(sub)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Verification {
        preprocess: PreprocessConfig,
        y: Box<SubmodelHeader>,
        crcb: Box<SubmodelHeader>,
        meta: LinearHeader,
    },
    Pixelhop {
        hop: HopHeader,
    },
}

pub fn model_to_bytes(model: &VerificationModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let header = Header::Verification {
        preprocess: model.preprocess.clone(),
        y: Box::new(write_submodel(&mut w, &model.submodel_y)),
        crcb: Box::new(write_submodel(&mut w, &model.submodel_crcb)),
        meta: write_linear(&mut w, &model.meta),
    };
    encode(&header, &w.reals)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<VerificationModel> {
    let (header, reals) = decode::<Header>(bytes)?;
    let r = Reader { reals: &reals };
    match header {
        Header::Verification { preprocess, y, crcb, meta } => Ok(VerificationModel {
            submodel_y: read_submodel(&r, *y)?,
            submodel_crcb: read_submodel(&r, *crcb)?,
            meta: read_linear(&r, meta)?,
            preprocess,
        }),
        Header::Pixelhop { .. } => Err(Error::Corrupt("container holds a bare transform, not a verifier".into())),
    }
}

pub fn pixelhop_to_bytes(model: &PixelHopModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let header = Header::Pixelhop { hop: write_hop(&mut w, model) };
    encode(&header, &w.reals)
}

pub fn pixelhop_from_bytes(bytes: &[u8]) -> Result<PixelHopModel> {
    let (header, reals) = decode::<Header>(bytes)?;
    match header {
        Header::Pixelhop { hop } => read_hop(&Reader { reals: &reals }, hop),
        Header::Verification { .. } => Err(Error::Corrupt("container holds a verifier, not a bare transform".into())),
    }
}

pub fn save_model(model: &VerificationModel, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<VerificationModel> {
    model_from_bytes(&std::fs::read(path)?)
}

pub fn save_pixelhop(model: &PixelHopModel, path: &Path) -> Result<()> {
    write_atomic(path, &pixelhop_to_bytes(model)?)
}

pub fn load_pixelhop(path: &Path) -> Result<PixelHopModel> {
    pixelhop_from_bytes(&std::fs::read(path)?)
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let reals = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, 3.0];
        let bytes = encode(&serde_json::json!({"a": 1}), &reals).unwrap();
        let (h, r): (serde_json::Value, Vec<f64>) = decode(&bytes).unwrap();
        assert_eq!(h["a"], 1);
        assert_eq!(r.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), reals.map(f64::to_bits));
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let bytes = encode(&serde_json::json!({"k": [1, 2]}), &[1.5, 2.5]).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode::<serde_json::Value>(&bad).is_err(), "byte {i}");
        }
    }

    #[test]
    fn truncation_and_future_versions() {
        let bytes = encode(&serde_json::json!({}), &[1.0]).unwrap();
        for n in 0..bytes.len() {
            assert!(decode::<serde_json::Value>(&bytes[..n]).is_err());
        }
        let mut future = bytes.clone();
        future[4..6].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode::<serde_json::Value>(&future),
            Err(Error::Version { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }
}
