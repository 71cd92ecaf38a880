//! Model checkpoint format `OSAM`, little-endian:
//!
//! ```text
//! magic "OSAM" | u16 version | u64 seed | u32 ndim, u32 dims... (item input shape)
//! u32 layer count
//! per layer: u8 tag | u32 fields... | f64 dropout rate | u32 tensor count
//!            per tensor: u32 ndim | u32 dims... | f32 values...
//! u32 CRC-32 of everything above
//! ```
//!
//! Layer tags and fields: 1 conv2d and 2 conv_transpose2d (in, out, kernel,
//! stride, padding), 3 batchnorm2d (channels; tensors γ, β, running mean,
//! running variance), 4 relu, 5 sigmoid, 6 dense (in, out), 7 dropout,
//! 8 flatten. The dropout rate field is 0 for all other layers.

use std::fs;
use std::path::Path;

use crate::codec::{check_magic, verify_crc, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

use super::layers::{Layer, LayerSpec};
use super::{Scalar, Sequential, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OSAM";
const VERSION: u16 = 1;
const MAX_RANK: u32 = 8;

fn fmt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn spec_fields(spec: &LayerSpec) -> (u8, Vec<usize>, f64) {
    match *spec {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
            (1, vec![in_ch, out_ch, kernel, stride, padding], 0.0)
        }
        LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, padding } => {
            (2, vec![in_ch, out_ch, kernel, stride, padding], 0.0)
        }
        LayerSpec::BatchNorm2d { channels } => (3, vec![channels], 0.0),
        LayerSpec::Relu => (4, vec![], 0.0),
        LayerSpec::Sigmoid => (5, vec![], 0.0),
        LayerSpec::Dense { inputs, outputs } => (6, vec![inputs, outputs], 0.0),
        LayerSpec::Dropout { rate } => (7, vec![], rate),
        LayerSpec::Flatten => (8, vec![], 0.0),
    }
}

fn field_count(tag: u8) -> Result<usize> {
    Ok(match tag {
        1 | 2 => 5,
        3 => 1,
        6 => 2,
        4 | 5 | 7 | 8 => 0,
        t => return fmt(format!("unknown layer tag {t}")),
    })
}

fn spec_from(tag: u8, f: &[usize], rate: f64) -> LayerSpec {
    match tag {
        1 => LayerSpec::Conv2d { in_ch: f[0], out_ch: f[1], kernel: f[2], stride: f[3], padding: f[4] },
        2 => LayerSpec::ConvTranspose2d { in_ch: f[0], out_ch: f[1], kernel: f[2], stride: f[3], padding: f[4] },
        3 => LayerSpec::BatchNorm2d { channels: f[0] },
        4 => LayerSpec::Relu,
        5 => LayerSpec::Sigmoid,
        6 => LayerSpec::Dense { inputs: f[0], outputs: f[1] },
        7 => LayerSpec::Dropout { rate },
        _ => LayerSpec::Flatten,
    }
}

fn stored_tensors<T: Scalar>(layer: &Layer<T>) -> Vec<&Tensor<T>> {
    let mut v: Vec<&Tensor<T>> = layer.params().into_iter().map(|p| &p.value).collect();
    if let Layer::BatchNorm2d(bn) = layer {
        v.push(&bn.running_mean);
        v.push(&bn.running_var);
    }
    v
}

fn stored_tensors_mut<T: Scalar>(layer: &mut Layer<T>) -> Vec<&mut Tensor<T>> {
    match layer {
        Layer::BatchNorm2d(bn) => vec![
            &mut bn.gamma.value,
            &mut bn.beta.value,
            &mut bn.running_mean,
            &mut bn.running_var,
        ],
        other => other.params_mut().into_iter().map(|p| &mut p.value).collect(),
    }
}

fn put_dims(w: &mut Writer, dims: &[usize]) {
    w.u32(dims.len() as u32);
    dims.iter().for_each(|&d| w.u32(d as u32));
}

fn get_dims(r: &mut Reader) -> Result<Vec<usize>> {
    let n = r.u32()?;
    if n > MAX_RANK {
        return fmt(format!("tensor rank {n} too large"));
    }
    (0..n).map(|_| Ok(r.u32()? as usize)).collect()
}

/// Serialises the architecture, parameters and batch-norm statistics.
/// Values are stored as `f32`.
pub fn encode_checkpoint<T: Scalar>(model: &Sequential<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(VERSION);
    w.u64(model.seed());
    put_dims(&mut w, model.input_shape());
    w.u32(model.layers.len() as u32);
    for layer in &model.layers {
        let (tag, fields, rate) = spec_fields(&layer.spec());
        w.u8(tag);
        fields.iter().for_each(|&f| w.u32(f as u32));
        w.f64(rate);
        let tensors = stored_tensors(layer);
        w.u32(tensors.len() as u32);
        for t in tensors {
            put_dims(&mut w, &t.shape);
            t.data.iter().for_each(|v| w.f32(v.as_f64() as f32));
        }
    }
    w.seal()
}

pub fn decode_checkpoint<T: Scalar>(data: &[u8]) -> Result<Sequential<T>> {
    check_magic(data, CHECKPOINT_MAGIC)?;
    let mut r = Reader::new(&data[4..]);
    let version = r.u16()?;
    if version != VERSION {
        return fmt(format!("unsupported checkpoint version {version}"));
    }
    let body = verify_crc(data)?;
    let mut r = Reader::new(body);
    r.take(6)?;
    let seed = r.u64()?;
    let input_shape = get_dims(&mut r)?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = r.u8()?;
        let fields = (0..field_count(tag)?).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let rate = r.f64()?;
        let spec = spec_from(tag, &fields, rate);
        let mut layer: Layer<T> = spec
            .build(0, derive_seed(seed, stream::DROPOUT, i as u64))
            .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
        let n = r.u32()? as usize;
        let slots = stored_tensors_mut(&mut layer);
        if n != slots.len() {
            return fmt(format!("layer {i}: expected {} tensors, found {n}", slots.len()));
        }
        for slot in slots {
            let dims = get_dims(&mut r)?;
            if dims != slot.shape {
                return fmt(format!("layer {i}: tensor shape {dims:?}, expected {:?}", slot.shape));
            }
            for v in slot.data.iter_mut() {
                *v = T::of(r.f32()? as f64);
            }
        }
        layers.push(layer);
    }
    if !r.is_empty() {
        return fmt("trailing bytes after the last layer");
    }
    Sequential::from_layers(layers, &input_shape, seed).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(model: &Sequential<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Sequential<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn model() -> Sequential<f32> {
        let specs = [
            LayerSpec::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm2d { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::ConvTranspose2d { in_ch: 4, out_ch: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 50, outputs: 7 },
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Sigmoid,
        ];
        let mut m = Sequential::new(&specs, &[2, 5, 5], 3).unwrap();
        // move the running statistics away from their initial values
        let x = Tensor::from_f64(&[2, 2, 5, 5], &(0..100).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact_in_f32() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back: Sequential<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.specs(), m.specs());
        assert_eq!(encode_checkpoint(&back), bytes);
        let x = Tensor::from_f64(&[1, 2, 5, 5], &vec![0.3; 50]).unwrap();
        assert_eq!(back.infer(&x).unwrap(), m.infer(&x).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&model());
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Checksum { .. })));
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 9]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&magic), Err(Error::Format(_))));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&ver), Err(Error::Format(_))));
    }
}
