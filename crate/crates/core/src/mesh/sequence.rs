use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::ops;

pub const MESH_MAGIC: &[u8; 4] = b"PTKM";
pub const MESH_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 4;

/// `T` frames of `N_v` vertex positions in millimetres, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    vertex_count: usize,
    fps: f32,
    frames: Vec<f32>,
}

impl MotionSequence {
    pub fn new(vertex_count: usize, fps: f32, frames: Vec<f32>) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::Input("motion sequence needs at least one vertex".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Input(format!("fps must be positive, got {fps}")));
        }
        let stride = vertex_count * 3;
        if frames.is_empty() || frames.len() % stride != 0 {
            return Err(Error::Input(format!(
                "{} values do not form whole frames of {vertex_count} vertices",
                frames.len()
            )));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite coordinate at flat index {i}")));
        }
        Ok(Self {
            vertex_count,
            fps,
            frames,
        })
    }

    /// Builds a sequence from a `(T, N_v, 3)` tensor.
    pub fn from_tensor(t: &Tensor, fps: f32) -> Result<Self> {
        let (_, n, c) = t.dims3()?;
        if c != 3 {
            return Err(Error::Input(format!("expected 3 coordinates per vertex, got {c}")));
        }
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(n, fps, values)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let values = self.frames.iter().map(|&v| v as f64).collect();
        ops::from_f64(values, (self.len(), self.vertex_count, 3), dtype)
    }

    pub fn len(&self) -> usize {
        self.frames.len() / (self.vertex_count * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn values(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let stride = self.vertex_count * 3;
        &self.frames[t * stride..(t + 1) * stride]
    }

    pub fn vertex(&self, t: usize, v: usize) -> [f32; 3] {
        let f = self.frame(t);
        [f[3 * v], f[3 * v + 1], f[3 * v + 2]]
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::SequenceLength {
                step: start + len,
                available: self.len(),
            });
        }
        let stride = self.vertex_count * 3;
        Self::new(
            self.vertex_count,
            self.fps,
            self.frames[start * stride..(start + len) * stride].to_vec(),
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.frames.len() * 4);
        buf.extend_from_slice(MESH_MAGIC);
        buf.push(MESH_VERSION);
        buf.extend_from_slice(&(self.vertex_count as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.fps.to_le_bytes());
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("file shorter than the header"));
        }
        if &bytes[0..4] != MESH_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes[4] != MESH_VERSION {
            return Err(corrupt(&format!("unsupported version {}", bytes[4])));
        }
        let word = |at: usize| [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
        let n = u32::from_le_bytes(word(5)) as usize;
        let t = u32::from_le_bytes(word(9)) as usize;
        let fps = f32::from_le_bytes(word(13));
        if n == 0 || t == 0 {
            return Err(corrupt("zero vertex or frame count"));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(corrupt("non-positive fps"));
        }
        let expected = n
            .checked_mul(t)
            .and_then(|v| v.checked_mul(12))
            .ok_or_else(|| corrupt("header sizes overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(corrupt(&format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let frames = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(n, fps, frames).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file), path)
    }
}

/// Neutral-face vertex positions that predictions are displacements from.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    vertices: Vec<f32>,
}

impl Template {
    pub fn new(vertices: Vec<f32>) -> Result<Self> {
        if vertices.is_empty() || vertices.len() % 3 != 0 {
            return Err(Error::Input("template needs a whole number of 3D vertices".into()));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("template contains non-finite coordinates".into()));
        }
        Ok(Self { vertices })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn values(&self) -> &[f32] {
        &self.vertices
    }

    /// `(N_v, 3)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let values = self.vertices.iter().map(|&v| v as f64).collect();
        ops::from_f64(values, (self.vertex_count(), 3), dtype)
    }

    /// The template repeated for `frames` frames.
    pub fn repeat(&self, frames: usize, fps: f32) -> Result<MotionSequence> {
        MotionSequence::new(self.vertex_count(), fps, self.vertices.repeat(frames))
    }

    /// Stored as a one-frame mesh sequence.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.repeat(1, 1.0)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let seq = MotionSequence::load(path)?;
        Self::new(seq.frame(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MotionSequence {
        let values = (0..2 * 3 * 3).map(|i| i as f32 * 0.25 - 1.0).collect();
        MotionSequence::new(3, 25.0, values).unwrap()
    }

    #[test]
    fn header_layout_is_little_endian() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"PTKM");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[5..9], &3u32.to_le_bytes());
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..17], &25f32.to_le_bytes());
        assert_eq!(buf.len(), 17 + 18 * 4);
    }

    #[test]
    fn corrupt_inputs_are_reported() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let p = Path::new("x.ptkm");
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            MotionSequence::read_from(&bad_magic[..], p),
            Err(Error::CorruptHeader { .. })
        ));
        assert!(matches!(
            MotionSequence::read_from(&buf[..buf.len() - 1], p),
            Err(Error::CorruptHeader { .. })
        ));
        assert!(matches!(
            MotionSequence::read_from(&buf[..10], p),
            Err(Error::CorruptHeader { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_and_bad_fps() {
        assert!(MotionSequence::new(1, 25.0, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(MotionSequence::new(1, 0.0, vec![0.0; 3]).is_err());
        assert!(MotionSequence::new(2, 25.0, vec![0.0; 3]).is_err());
    }

    #[test]
    fn missing_file_is_distinct_error() {
        assert!(matches!(
            MotionSequence::load(Path::new("/nonexistent/seq.ptkm")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn window_and_tensor_round_trip() {
        let s = sample();
        let w = s.window(1, 1).unwrap();
        assert_eq!(w.frame(0), s.frame(1));
        let t = s.to_tensor(DType::F32).unwrap();
        assert_eq!(MotionSequence::from_tensor(&t, 25.0).unwrap(), s);
        assert!(s.window(1, 2).is_err());
    }
}
