//! `RSNN` portable weight file.
//!
//! ```text
//! "RSNN"  u16 version  u32 rows  u32 cols  u32 layer_count
//! layer descriptors (u8 tag + fields, see below)
//! u32 param_count  f32 x param_count
//! u32 crc32 (IEEE) of every preceding byte
//! ```
//!
//! Tags: 1 conv1d (u32 filters, u32 kernel, u8 act), 2 maxpool1d (u32 size),
//! 3 flatten, 4 dense (u32 units, u8 act), 5 dropout (f32 rate), 6 softmax.
//! Activations: 0 linear, 1 relu. Everything is little-endian; parameters
//! are laid out layer by layer, weights before biases.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Layer, LayerParams, ModelSpec, NnError, Result, Weights};

pub const MAGIC: &[u8; 4] = b"RSNN";
pub const FORMAT_VERSION: u16 = 1;

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Linear => 0,
        Activation::Relu => 1,
    }
}

fn act_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Linear),
        1 => Ok(Activation::Relu),
        c => Err(NnError::Malformed(format!("unknown activation code {c}"))),
    }
}

pub fn write_weights<W: Write>(mut out: W, spec: &ModelSpec, weights: &Weights) -> Result<()> {
    weights.check(spec)?;
    let mut buf = Vec::with_capacity(64 + 4 * weights.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.input_shape.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.input_shape.1 as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
    for layer in &spec.layers {
        match *layer {
            Layer::Conv1d { filters, kernel, activation } => {
                buf.push(1);
                buf.extend_from_slice(&(filters as u32).to_le_bytes());
                buf.extend_from_slice(&(kernel as u32).to_le_bytes());
                buf.push(act_code(activation));
            }
            Layer::MaxPool1d { size } => {
                buf.push(2);
                buf.extend_from_slice(&(size as u32).to_le_bytes());
            }
            Layer::Flatten => buf.push(3),
            Layer::Dense { units, activation } => {
                buf.push(4);
                buf.extend_from_slice(&(units as u32).to_le_bytes());
                buf.push(act_code(activation));
            }
            Layer::Dropout { rate } => {
                buf.push(5);
                buf.extend_from_slice(&(rate as f32).to_le_bytes());
            }
            Layer::Softmax => buf.push(6),
        }
    }
    buf.extend_from_slice(&(weights.param_count() as u32).to_le_bytes());
    for &v in weights.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_weights<R: Read>(mut input: R) -> Result<(ModelSpec, Weights)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(NnError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(NnError::CrcMismatch { stored: 0, computed: crc32fast::hash(&bytes) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(NnError::CrcMismatch { stored, computed });
    }

    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match c.u8()? {
            1 => Layer::Conv1d { filters: c.u32()? as usize, kernel: c.u32()? as usize, activation: act_from(c.u8()?)? },
            2 => Layer::MaxPool1d { size: c.u32()? as usize },
            3 => Layer::Flatten,
            4 => Layer::Dense { units: c.u32()? as usize, activation: act_from(c.u8()?)? },
            5 => Layer::Dropout { rate: c.f32()? as f64 },
            6 => Layer::Softmax,
            t => return Err(NnError::Malformed(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let spec = ModelSpec { input_shape: (rows, cols), layers };
    let shapes = spec.param_shapes()?;
    let n = c.u32()? as usize;
    let expected: usize = shapes.iter().map(|(w, b)| w + b).sum();
    if n != expected {
        return Err(NnError::Malformed(format!("spec needs {expected} parameters, file has {n}")));
    }
    let mut weights = Weights::default();
    for (wc, bc) in shapes {
        let mut p = LayerParams { weights: Vec::with_capacity(wc), bias: Vec::with_capacity(bc) };
        for _ in 0..wc {
            p.weights.push(c.f32()? as f64);
        }
        for _ in 0..bc {
            p.bias.push(c.f32()? as f64);
        }
        weights.layers.push(p);
    }
    if c.pos != body.len() {
        return Err(NnError::Malformed(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok((spec, weights))
}

pub fn save_weights(spec: &ModelSpec, weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(&mut buf, spec, weights)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelSpec, Weights)> {
    read_weights(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn trained_like() -> (ModelSpec, Weights) {
        let spec = ModelSpec::default_audio((61, 40));
        let mut w = Weights::init(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(7)).unwrap();
        w.layers[0].bias[3] = -0.125;
        w.round_to_f32();
        (spec, w)
    }

    fn encode(spec: &ModelSpec, w: &Weights) -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(&mut buf, spec, w).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (spec, w) = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rsnn");
        save_weights(&spec, &w, &path).unwrap();
        let (spec2, w2) = load_weights(&path).unwrap();
        assert_eq!(spec2, spec);
        let a: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = w2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn payload_size_accounting() {
        let (spec, w) = trained_like();
        let bytes = encode(&spec, &w);
        // header 4+2+4+4+4, layers conv 10, pool 5, conv 10, pool 5, flatten 1,
        // dropout 5, dense 6, softmax 1, count 4, crc 4
        let overhead = 18 + 10 + 5 + 10 + 5 + 1 + 5 + 6 + 1 + 4 + 4;
        assert_eq!(bytes.len(), 4 * 2413 + overhead);
    }

    #[test]
    fn truncation_is_crc_mismatch() {
        let (spec, w) = trained_like();
        let bytes = encode(&spec, &w);
        for cut in [bytes.len() - 1, bytes.len() / 2, 7] {
            assert!(matches!(read_weights(&bytes[..cut]), Err(NnError::CrcMismatch { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let (spec, w) = trained_like();
        let mut bytes = encode(&spec, &w);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(read_weights(&wrong[..]), Err(NnError::BadMagic)));

        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_weights(&bytes[..]), Err(NnError::UnsupportedVersion(9))));
    }

    #[test]
    fn flipped_bit_detected() {
        let (spec, w) = trained_like();
        let mut bytes = encode(&spec, &w);
        bytes[100] ^= 0x10;
        assert!(matches!(read_weights(&bytes[..]), Err(NnError::CrcMismatch { .. })));
    }
}
