//! Layered encoding and decoding.
//!
//! Layer 0 codes the image. Layer `i >= 1` codes the difference between the
//! image and the decoder-side reconstruction accumulated over layers
//! `0..i`, so the encoder runs a decoder internally and both sides agree
//! exactly. Reconstructions are summed in model units and only the final
//! sum is clamped and rounded.
//!
//! Stream layout (little-endian):
//!
//! ```text
//! "SAEB" | version u16 | width u32 | height u32 | padded width u32 | padded height u32
//! | layers u8 | model hash u64 | payload lengths u32[layers] | payloads
//! ```

use std::path::Path;

use crate::bytes::Reader;
use crate::entropy_model::{likelihood, quantize, CdfTable, IntTensor};
use crate::error::{Error, Result};
use crate::image_io::{pad_image, RgbImage};
use crate::model_file::model_hash;
use crate::network::{LayerModel, ScalableModel, DOWNSAMPLE};
use crate::numerics::{Shape, Tensor};
use crate::range_coder::{channel_major_ids, rc_decode, rc_encode, Payload};

const MAGIC: &[u8; 4] = b"SAEB";
pub const STREAM_VERSION: u16 = 1;
/// Largest accepted image side.
pub const MAX_SIDE: usize = 1 << 16;

/// Header plus one entropy-coded payload per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayeredBitstream {
    pub orig_width: u32,
    pub orig_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub model_hash: u64,
    pub payloads: Vec<Vec<u8>>,
}

impl LayeredBitstream {
    pub fn num_layers(&self) -> usize {
        self.payloads.len()
    }

    pub fn header_len(&self) -> usize {
        header_len(self.payloads.len())
    }

    /// Total serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        self.header_len() + self.payloads.iter().map(Vec::len).sum::<usize>()
    }

    pub fn pixels(&self) -> usize {
        self.orig_width as usize * self.orig_height as usize
    }

    /// Payload bits of each layer divided by the original pixel count.
    pub fn layer_bpp(&self) -> Vec<f64> {
        let px = self.pixels() as f64;
        self.payloads.iter().map(|p| p.len() as f64 * 8.0 / px).collect()
    }

    /// Running sum of [`LayeredBitstream::layer_bpp`].
    pub fn cumulative_bpp(&self) -> Vec<f64> {
        self.layer_bpp()
            .into_iter()
            .scan(0.0, |acc, b| {
                *acc += b;
                Some(*acc)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        for v in [self.orig_width, self.orig_height, self.padded_width, self.padded_height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.payloads.len() as u8);
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        for p in &self.payloads {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        }
        for p in &self.payloads {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::format("missing SAEB magic"));
        }
        let version = r.u16()?;
        if version != STREAM_VERSION {
            return Err(Error::Unsupported(format!("stream version {version}")));
        }
        let orig_width = r.u32()?;
        let orig_height = r.u32()?;
        let padded_width = r.u32()?;
        let padded_height = r.u32()?;
        let layers = r.u8()? as usize;
        let model_hash = r.u64()?;
        let lengths = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let stream = LayeredBitstream {
            orig_width,
            orig_height,
            padded_width,
            padded_height,
            model_hash,
            payloads: Vec::new(),
        };
        stream.check_geometry()?;
        if layers == 0 {
            return Err(Error::format("stream has no layers"));
        }
        let mut payloads = Vec::with_capacity(layers);
        for (i, &n) in lengths.iter().enumerate() {
            let body = r.take(n as usize).map_err(|_| Error::Decode {
                offset: bytes.len(),
                reason: format!("payload of layer {i} truncated ({n} bytes declared)"),
            })?;
            payloads.push(body.to_vec());
        }
        if r.remaining() != 0 {
            return Err(Error::Decode {
                offset: r.pos(),
                reason: format!("{} bytes after the last payload", r.remaining()),
            });
        }
        Ok(LayeredBitstream { payloads, ..stream })
    }

    fn check_geometry(&self) -> Result<()> {
        let ok = |orig: u32, padded: u32| {
            orig > 0
                && padded as usize % DOWNSAMPLE == 0
                && padded >= orig
                && ((padded - orig) as usize) < DOWNSAMPLE
        };
        if !ok(self.orig_width, self.padded_width) || !ok(self.orig_height, self.padded_height) {
            return Err(Error::format(format!(
                "inconsistent dimensions {}x{} padded to {}x{}",
                self.orig_width, self.orig_height, self.padded_width, self.padded_height
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn header_len(layers: usize) -> usize {
    4 + 2 + 16 + 1 + 8 + 4 * layers
}

/// Keeps the first `k` layers.
pub fn truncate(stream: &LayeredBitstream, k: usize) -> Result<LayeredBitstream> {
    if k == 0 || k > stream.num_layers() {
        return Err(Error::invalid(format!(
            "cannot keep {k} of {} layers",
            stream.num_layers()
        )));
    }
    let mut out = stream.clone();
    out.payloads.truncate(k);
    Ok(out)
}

/// Intermediate values of an encode, for inspection and tests.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    /// What each layer's analysis transform received, in model units.
    pub layer_inputs: Vec<Tensor>,
    /// Quantized (and support-clamped) symbols per layer.
    pub symbols: Vec<IntTensor>,
    /// Accumulated reconstruction after each layer, in model units.
    pub reconstructions: Vec<Tensor>,
    /// Model-estimated bits of each layer's symbols.
    pub estimated_bits: Vec<f64>,
}

fn check_model(model: &ScalableModel, k: usize) -> Result<()> {
    if k == 0 || k > model.num_layers() {
        return Err(Error::invalid(format!(
            "layer count {k} outside 1..={}",
            model.num_layers()
        )));
    }
    if let Some(l) = model.layers[..k].iter().find(|l| !l.is_trained()) {
        return Err(Error::Model(format!(
            "layer {} has not been trained",
            l.layer_index
        )));
    }
    Ok(())
}

fn clamp_to_support(q: &mut IntTensor, table: &CdfTable) {
    let s = q.shape;
    let plane = s.plane();
    for (i, v) in q.data.iter_mut().enumerate() {
        let c = (i / plane) % s.channels;
        *v = table.channel(c).clamp(*v);
    }
}

/// Symbols of one coded layer, clamped into the frozen support.
fn layer_symbols(layer: &LayerModel, input: &Tensor) -> Result<IntTensor> {
    let mut q = quantize(&layer.analysis(input)?);
    clamp_to_support(&mut q, layer.cdf_table()?);
    Ok(q)
}

fn channel_ids(shape: Shape) -> Vec<usize> {
    (0..shape.batch)
        .flat_map(|_| channel_major_ids(shape.channels, shape.plane()))
        .collect()
}

/// Runs the layered encoder on a padded model-unit tensor.
fn encode_tensor(x: &Tensor, model: &ScalableModel, k: usize) -> Result<(Vec<Vec<u8>>, EncodeTrace)> {
    let mut trace = EncodeTrace {
        layer_inputs: Vec::with_capacity(k),
        symbols: Vec::with_capacity(k),
        reconstructions: Vec::with_capacity(k),
        estimated_bits: Vec::with_capacity(k),
    };
    let mut payloads = Vec::with_capacity(k);
    let mut acc = Tensor::zeros(x.shape());
    for layer in &model.layers[..k] {
        let input = if layer.layer_index == 0 { x.clone() } else { x.sub(&acc)? };
        let q = layer_symbols(layer, &input)?;
        let table = layer.cdf_table()?;
        let payload = rc_encode(&q.data, &channel_ids(q.shape), table)?;
        let qt = q.to_tensor();
        let bits: f64 = likelihood(&qt, &layer.entropy)?.data().iter().map(|p| -p.log2()).sum();
        acc.add_assign(&layer.synthesis(&qt)?)?;
        payloads.push(payload.bytes);
        trace.layer_inputs.push(input);
        trace.symbols.push(q);
        trace.reconstructions.push(acc.clone());
        trace.estimated_bits.push(bits);
    }
    Ok((payloads, trace))
}

fn check_image(image: &RgbImage) -> Result<()> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::invalid("image is empty"));
    }
    if image.width > MAX_SIDE || image.height > MAX_SIDE {
        return Err(Error::Unsupported(format!(
            "image {}x{} exceeds the {MAX_SIDE} pixel side limit",
            image.width, image.height
        )));
    }
    Ok(())
}

/// Encodes the first `k` layers of `image`.
pub fn sae_encode(image: &RgbImage, model: &ScalableModel, k: usize) -> Result<LayeredBitstream> {
    Ok(sae_encode_traced(image, model, k)?.0)
}

/// [`sae_encode`] that also returns every intermediate value.
pub fn sae_encode_traced(image: &RgbImage, model: &ScalableModel, k: usize) -> Result<(LayeredBitstream, EncodeTrace)> {
    check_image(image)?;
    check_model(model, k)?;
    let (padded, (w, h)) = pad_image(image);
    let x = model.to_units(&padded);
    let (payloads, trace) = encode_tensor(&x, model, k)?;
    let stream = LayeredBitstream {
        orig_width: w as u32,
        orig_height: h as u32,
        padded_width: padded.width as u32,
        padded_height: padded.height as u32,
        model_hash: model_hash(model)?,
        payloads,
    };
    Ok((stream, trace))
}

/// Decodes every layer of `stream` and returns the accumulated
/// reconstruction after each, in model units and at padded size.
pub fn decode_accumulated(stream: &LayeredBitstream, model: &ScalableModel, k: Option<usize>) -> Result<Vec<Tensor>> {
    let found = model_hash(model)?;
    if stream.model_hash != found {
        return Err(Error::WrongModel {
            expected: stream.model_hash,
            found,
        });
    }
    let k = k.unwrap_or(stream.num_layers());
    if k == 0 || k > stream.num_layers() {
        return Err(Error::invalid(format!(
            "cannot decode {k} of {} layers",
            stream.num_layers()
        )));
    }
    check_model(model, k)?;
    let (pw, ph) = (stream.padded_width as usize, stream.padded_height as usize);
    let mut acc = Tensor::zeros(Shape::new(1, 3, ph, pw));
    let mut out = Vec::with_capacity(k);
    for (i, layer) in model.layers[..k].iter().enumerate() {
        let shape = Shape::new(1, layer.feature_maps, ph / DOWNSAMPLE, pw / DOWNSAMPLE);
        let ids = channel_ids(shape);
        let payload = Payload {
            bytes: stream.payloads[i].clone(),
            symbol_count: ids.len(),
        };
        let symbols = rc_decode(&payload, &ids, layer.cdf_table()?).map_err(|e| match e {
            Error::Decode { offset, reason } => Error::Decode {
                offset: stream.header_len() + stream.payloads[..i].iter().map(Vec::len).sum::<usize>() + offset,
                reason: format!("layer {i}: {reason}"),
            },
            other => other,
        })?;
        let q = IntTensor { shape, data: symbols };
        acc.add_assign(&layer.synthesis(&q.to_tensor())?)?;
        out.push(acc.clone());
    }
    Ok(out)
}

fn finish(acc: &Tensor, model: &ScalableModel, w: usize, h: usize) -> Result<RgbImage> {
    model.to_image(acc, w, h)
}

/// Decodes the first `k` layers (all by default) into an 8-bit image.
pub fn sae_decode(stream: &LayeredBitstream, model: &ScalableModel, k: Option<usize>) -> Result<RgbImage> {
    let acc = decode_accumulated(stream, model, k)?;
    let last = acc.last().expect("at least one layer decoded");
    finish(last, model, stream.orig_width as usize, stream.orig_height as usize)
}

/// One decoded image per layer prefix: entry `i` uses layers `0..=i`.
pub fn decode_progressive(stream: &LayeredBitstream, model: &ScalableModel) -> Result<Vec<RgbImage>> {
    let (w, h) = (stream.orig_width as usize, stream.orig_height as usize);
    decode_accumulated(stream, model, None)?
        .iter()
        .map(|t| finish(t, model, w, h))
        .collect()
}

/// The image a decoder would produce from `k` layers, computed without
/// entropy coding or serialization.
pub fn reconstruct_at_layer(image: &RgbImage, model: &ScalableModel, k: usize) -> Result<RgbImage> {
    check_image(image)?;
    check_model(model, k)?;
    let (padded, (w, h)) = pad_image(image);
    let acc = reconstruct_tensor(&model.to_units(&padded), model, k)?;
    finish(&acc, model, w, h)
}

/// Accumulated reconstruction (model units, padded size) after decoding
/// layers `0..k` of a model-unit input, without entropy coding. Used to
/// form training residuals from frozen layers.
pub fn reconstruct_tensor(x: &Tensor, model: &ScalableModel, k: usize) -> Result<Tensor> {
    let mut acc = Tensor::zeros(x.shape());
    for layer in &model.layers[..k] {
        let input = if layer.layer_index == 0 { x.clone() } else { x.sub(&acc)? };
        let q = layer_symbols(layer, &input)?;
        acc.add_assign(&layer.synthesis(&q.to_tensor())?)?;
    }
    Ok(acc)
}
