//! Binary bundle container.
//!
//! ```text
//! "SSHD"  magic
//! u16     format version
//! u16     flags (bit 0: quantized constants follow the float blocks)
//! [u8;32] config hash (zeros when unknown)
//! u32     number of layer sizes, then u32 per size
//! u32     model count m
//! u8      mode (0 baseline, 1 modelwise, 2 layerwise)
//! f32...  for each layer j, for each model k: W_j^k then B_j^k
//! [quantized section, same order: f32 scale, i8 zero point, i8 values]
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::{Architecture, Layer, ModelParams};
use crate::quant::{quantize, QuantParams, QuantTensor};
use crate::tensor::Tensor;
use crate::training::{ModelBundle, SelectionMode};

pub const BUNDLE_MAGIC: &[u8; 4] = b"SSHD";
pub const BUNDLE_VERSION: u16 = 1;
const FLAG_QUANTIZED: u16 = 1;

/// Quantized copies of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub weights: QuantTensor,
    pub bias: QuantTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleFile {
    pub bundle: ModelBundle,
    pub config_hash: [u8; 32],
    /// `quantized[j][k]` holds layer `j` of model `k`.
    pub quantized: Option<Vec<Vec<QuantLayer>>>,
}

impl BundleFile {
    pub fn new(bundle: ModelBundle, config_hash: [u8; 32], with_quantized: bool) -> Self {
        let quantized = with_quantized.then(|| quantize_bundle(&bundle));
        Self { bundle, config_hash, quantized }
    }
}

/// Per-tensor quantization of every weight and bias.
pub fn quantize_bundle(bundle: &ModelBundle) -> Vec<Vec<QuantLayer>> {
    (0..bundle.arch().layer_count())
        .map(|j| {
            bundle
                .models()
                .iter()
                .map(|m| QuantLayer { weights: quantize(&m.layer(j).weights), bias: quantize(&m.layer(j).bias) })
                .collect()
        })
        .collect()
}

fn mode_byte(mode: SelectionMode) -> u8 {
    match mode {
        SelectionMode::Baseline => 0,
        SelectionMode::Modelwise => 1,
        SelectionMode::Layerwise => 2,
    }
}

pub fn encode_bundle(file: &BundleFile) -> Vec<u8> {
    let bundle = &file.bundle;
    let mut out = Vec::with_capacity(64 + 4 * bundle.arch().parameter_count() * bundle.model_count());
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    let flags = if file.quantized.is_some() { FLAG_QUANTIZED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&file.config_hash);
    let sizes = bundle.arch().layer_sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&(bundle.model_count() as u32).to_le_bytes());
    out.push(mode_byte(bundle.mode()));
    for j in 0..bundle.arch().layer_count() {
        for model in bundle.models() {
            let layer = model.layer(j);
            for t in [&layer.weights, &layer.bias] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    if let Some(quantized) = &file.quantized {
        for per_model in quantized {
            for q in per_model {
                for t in [&q.weights, &q.bias] {
                    out.extend_from_slice(&t.qp().scale.to_le_bytes());
                    out.push(t.qp().zero_point as i8 as u8);
                    out.extend(t.values().iter().map(|&v| v as u8));
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format("bundle", format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("bundle", "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<BundleFile> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != BUNDLE_MAGIC {
        return Err(Error::format("bundle", "bad magic (expected SSHD)"));
    }
    let version = c.u16()?;
    if version != BUNDLE_VERSION {
        return Err(Error::format("bundle", format!("unsupported version {version}")));
    }
    let flags = c.u16()?;
    if flags & !FLAG_QUANTIZED != 0 {
        return Err(Error::format("bundle", format!("unknown flags {flags:#06x}")));
    }
    let config_hash: [u8; 32] = c.take(32)?.try_into().unwrap();
    let count = c.u32()? as usize;
    if count > 64 {
        return Err(Error::format("bundle", format!("implausible layer count {count}")));
    }
    let sizes = (0..count).map(|_| c.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
    let arch = Architecture::new(sizes).map_err(|e| Error::format("bundle", e.to_string()))?;
    let m = c.u32()? as usize;
    if m == 0 || m > 1 << 16 {
        return Err(Error::format("bundle", format!("implausible model count {m}")));
    }
    let mode = match c.u8()? {
        0 => SelectionMode::Baseline,
        1 => SelectionMode::Modelwise,
        2 => SelectionMode::Layerwise,
        other => return Err(Error::format("bundle", format!("unknown mode {other}"))),
    };

    let n = arch.layer_count();
    let mut layers: Vec<Vec<Layer>> = vec![Vec::with_capacity(n); m];
    for j in 0..n {
        let (o, i) = arch.layer_shape(j);
        for model in layers.iter_mut() {
            let weights = Tensor::new(vec![o, i], c.f32s(o * i)?)?;
            let bias = Tensor::new(vec![o], c.f32s(o)?)?;
            model.push(Layer { weights, bias });
        }
    }
    let models = layers.into_iter().map(|l| ModelParams::new(arch.clone(), l)).collect::<Result<Vec<_>>>()?;
    let bundle = ModelBundle::new(mode, models).map_err(|e| Error::format("bundle", e.to_string()))?;

    let quantized = if flags & FLAG_QUANTIZED != 0 {
        let mut per_layer = Vec::with_capacity(n);
        for j in 0..n {
            let (o, i) = arch.layer_shape(j);
            let mut per_model = Vec::with_capacity(m);
            for _ in 0..m {
                let weights = read_quant(&mut c, vec![o, i])?;
                let bias = read_quant(&mut c, vec![o])?;
                per_model.push(QuantLayer { weights, bias });
            }
            per_layer.push(per_model);
        }
        Some(per_layer)
    } else {
        None
    };
    if c.pos != bytes.len() {
        return Err(Error::format("bundle", format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(BundleFile { bundle, config_hash, quantized })
}

fn read_quant(c: &mut Cursor, shape: Vec<usize>) -> Result<QuantTensor> {
    let scale = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
    let zero_point = i32::from(c.u8()? as i8);
    let qp = QuantParams::new(scale, zero_point).map_err(|e| Error::format("bundle", e.to_string()))?;
    let len = shape.iter().product();
    let values = c.take(len)?.iter().map(|&b| b as i8).collect();
    QuantTensor::new(shape, values, qp)
}

pub fn write_bundle(w: &mut impl Write, file: &BundleFile) -> Result<()> {
    w.write_all(&encode_bundle(file))?;
    Ok(())
}

pub fn read_bundle(r: &mut impl Read) -> Result<BundleFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_bundle(&bytes)
}

pub fn save_bundle(path: &Path, file: &BundleFile) -> Result<()> {
    std::fs::write(path, encode_bundle(file)).map_err(|e| Error::file(path, e))
}

pub fn load_bundle(path: &Path) -> Result<BundleFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_bundle(&bytes)
}
