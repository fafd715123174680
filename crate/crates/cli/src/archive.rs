//! The `DLR1` weight archive: a 4-byte magic, a little-endian `u32`
//! manifest length, a UTF-8 JSON manifest, and a payload of little-endian
//! `f64`s in row-major order.
//!
//! The manifest lists each tensor's name, shape, and byte offset into the
//! payload. Offsets must tile the payload exactly: non-overlapping,
//! in-bounds, gap-free, with unique names, so two archives holding the
//! same tensors in the same order are byte-identical.

use anyhow::{bail, Context, Result};
use lrtp_core::model::{
    DecomposedModelWeights, DenseAttentionWeights, DenseLayerWeights, DenseMlpWeights,
    DenseModelWeights, MatrixName, MlpVariant, ModelConfig,
};
use lrtp_core::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DLR1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the payload section.
    pub offset: u64,
}

/// An ordered collection of named matrices with a bit-exact disk format.
#[derive(Debug, Clone, Default)]
pub struct WeightArchive {
    entries: Vec<(String, DenseMatrix)>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn insert(&mut self, name: &str, matrix: DenseMatrix) -> Result<()> {
        if self.get(name).is_some() {
            bail!("archive already holds a tensor named {name:?}");
        }
        self.entries.push((name.to_string(), matrix));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, m) in &self.entries {
            manifest.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += (m.rows() * m.cols() * 8) as u64;
        }
        let manifest_json =
            serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");

        let mut out = Vec::with_capacity(8 + manifest_json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for (_, m) in &self.entries {
            for &x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            bail!("archive of {} bytes is too short for the header", bytes.len());
        }
        if bytes[..4] != MAGIC {
            bail!("bad magic {:?}, expected {:?}", &bytes[..4], MAGIC);
        }
        let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .with_context(|| format!("manifest length {manifest_len} overruns the archive"))?;
        let manifest: Vec<TensorEntry> = serde_json::from_slice(&bytes[8..payload_start])
            .context("manifest is not valid JSON")?;
        let payload = &bytes[payload_start..];

        // Offsets must tile the payload exactly and in manifest order.
        let mut expected_offset = 0u64;
        for e in &manifest {
            if e.offset != expected_offset {
                bail!(
                    "tensor {:?} at offset {} leaves a gap or overlap (expected {})",
                    e.name,
                    e.offset,
                    expected_offset
                );
            }
            let size = e
                .rows
                .checked_mul(e.cols)
                .and_then(|n| n.checked_mul(8))
                .with_context(|| format!("tensor {:?} shape overflows", e.name))?;
            expected_offset += size as u64;
        }
        if expected_offset != payload.len() as u64 {
            bail!(
                "manifest describes {expected_offset} payload bytes, archive holds {}",
                payload.len()
            );
        }

        let mut archive = WeightArchive::new();
        for e in &manifest {
            let start = e.offset as usize;
            let n = e.rows * e.cols;
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let at = start + i * 8;
                    f64::from_le_bytes(payload[at..at + 8].try_into().unwrap())
                })
                .collect();
            let matrix = DenseMatrix::new(e.rows, e.cols, data)
                .with_context(|| format!("tensor {:?} is malformed", e.name))?;
            archive
                .insert(&e.name, matrix)
                .with_context(|| "manifest names are not unique")?;
        }
        Ok(archive)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .with_context(|| format!("writing archive {}", path.display()))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading archive {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing archive {}", path.display()))
    }
}

/// Canonical tensor name for one matrix of one layer.
pub fn tensor_name(layer: usize, name: MatrixName) -> String {
    let group = match name {
        MatrixName::Q | MatrixName::K | MatrixName::V | MatrixName::O => "attention",
        MatrixName::Up | MatrixName::Gate | MatrixName::Down => "mlp",
    };
    format!("layer{layer}.{group}.{name}")
}

fn layer_matrices(cfg: &ModelConfig) -> Vec<MatrixName> {
    MatrixName::ALL
        .into_iter()
        .filter(|&m| m != MatrixName::Gate || cfg.mlp_variant == MlpVariant::Glu)
        .collect()
}

/// Pack dense model weights into an archive, layer-major.
pub fn dense_to_archive(cfg: &ModelConfig, weights: &DenseModelWeights) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new();
    for layer in 0..weights.layers.len() {
        for name in layer_matrices(cfg) {
            let m = weights
                .matrix(layer, name)
                .with_context(|| format!("weights are missing {}", tensor_name(layer, name)))?;
            archive.insert(&tensor_name(layer, name), m.clone())?;
        }
    }
    Ok(archive)
}

/// Rebuild dense model weights from an archive, checking shapes against the
/// config and naming any missing tensor.
pub fn dense_from_archive(cfg: &ModelConfig, archive: &WeightArchive) -> Result<DenseModelWeights> {
    cfg.validate()?;
    let fetch = |layer: usize, name: MatrixName, rows: usize, cols: usize| -> Result<DenseMatrix> {
        let key = tensor_name(layer, name);
        let m = archive
            .get(&key)
            .with_context(|| format!("archive is missing tensor {key:?}"))?;
        if m.rows() != rows || m.cols() != cols {
            bail!(
                "tensor {key:?} is {}x{}, config needs {rows}x{cols}",
                m.rows(),
                m.cols()
            );
        }
        Ok(m.clone())
    };

    let (h, h_kv, im) = (cfg.hidden_dim(), cfg.kv_dim(), cfg.intermediate_dim);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        layers.push(DenseLayerWeights {
            attention: DenseAttentionWeights {
                wq: fetch(l, MatrixName::Q, h, h)?,
                wk: fetch(l, MatrixName::K, h, h_kv)?,
                wv: fetch(l, MatrixName::V, h, h_kv)?,
                wo: fetch(l, MatrixName::O, h, h)?,
            },
            mlp: DenseMlpWeights {
                up: fetch(l, MatrixName::Up, h, im)?,
                gate: match cfg.mlp_variant {
                    MlpVariant::Glu => Some(fetch(l, MatrixName::Gate, h, im)?),
                    MlpVariant::NonGlu => None,
                },
                down: fetch(l, MatrixName::Down, im, h)?,
            },
        });
    }
    Ok(DenseModelWeights { layers })
}

/// Pack a decomposed model into an archive as `<matrix>.down` /
/// `<matrix>.up` tensor pairs.
pub fn decomposed_to_archive(
    cfg: &ModelConfig,
    weights: &DecomposedModelWeights,
) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new();
    for (l, layer) in weights.layers.iter().enumerate() {
        for name in layer_matrices(cfg) {
            let pair = match name {
                MatrixName::Q => &layer.attention.q,
                MatrixName::K => &layer.attention.k,
                MatrixName::V => &layer.attention.v,
                MatrixName::O => &layer.attention.o,
                MatrixName::Up => &layer.mlp.up,
                MatrixName::Gate => layer
                    .mlp
                    .gate
                    .as_ref()
                    .with_context(|| format!("decomposed weights lack {}", tensor_name(l, name)))?,
                MatrixName::Down => &layer.mlp.down,
            };
            archive.insert(&format!("{}.down", tensor_name(l, name)), pair.down.clone())?;
            archive.insert(&format!("{}.up", tensor_name(l, name)), pair.up.clone())?;
        }
    }
    Ok(archive)
}
