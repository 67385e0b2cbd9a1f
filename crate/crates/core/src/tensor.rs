//! Media carrier and the `.tns` tensor container.
//!
//! Container layout: the 8 magic bytes `OIETNS01`, a little-endian `u32`
//! rank, `rank` little-endian `u32` dimensions, then the row-major
//! little-endian `f32` payload.

use std::fs;
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayD, ArrayView3, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 8] = b"OIETNS01";

/// Dense `F×C×H×W` video with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f32>,
}

impl VideoTensor {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((frames, channels, height, width)),
        }
    }

    pub fn from_array(data: Array4<f32>) -> Self {
        Self { data }
    }

    /// Builds a one-frame video from a `C×H×W` image.
    pub fn from_frame(frame: &Array3<f32>) -> Self {
        let (c, h, w) = frame.dim();
        let data = frame.to_owned().into_shape_with_order((1, c, h, w)).expect("contiguous frame");
        Self { data }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn array(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array4<f32> {
        &mut self.data
    }

    pub fn into_array(self) -> Array4<f32> {
        self.data
    }

    pub fn frame(&self, f: usize) -> ArrayView3<'_, f32> {
        self.data.slice(s![f, .., .., ..])
    }

    pub fn set_frame(&mut self, f: usize, frame: ArrayView3<'_, f32>) {
        self.data.slice_mut(s![f, .., .., ..]).assign(&frame);
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n
    }

    pub fn to_dyn(&self) -> ArrayD<f32> {
        self.data.clone().into_dyn()
    }

    pub fn from_dyn(data: ArrayD<f32>) -> Result<Self> {
        let shape = data.shape().to_vec();
        let data = data
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::Shape(format!("expected rank-4 video tensor, got shape {shape:?}")))?;
        Ok(Self { data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tns(path, &self.data.view().into_dyn())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arr = read_tns(path)?;
        Self::from_dyn(arr).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Serialises a tensor into the container format.
pub fn encode_tns(arr: &ArrayViewD<'_, f32>) -> Vec<u8> {
    let rank = arr.ndim();
    let mut out = Vec::with_capacity(8 + 4 + 4 * rank + 4 * arr.len());
    out.extend_from_slice(TNS_MAGIC);
    out.extend_from_slice(&(rank as u32).to_le_bytes());
    for &d in arr.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the container format. `origin` is only used in error messages.
pub fn decode_tns(bytes: &[u8], origin: &Path) -> Result<ArrayD<f32>> {
    let fail = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != TNS_MAGIC {
        return Err(fail("missing OIETNS01 magic".into()));
    }
    let read_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fail(format!("truncated header at byte {at}")))
    };
    let rank = read_u32(8)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(12 + 4 * i)? as usize);
    }
    let header = 12 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != 4 * count {
        return Err(fail(format!(
            "payload has {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            4 * count
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| fail(e.to_string()))
}

pub fn write_tns(path: &Path, arr: &ArrayViewD<'_, f32>) -> Result<()> {
    fs::write(path, encode_tns(arr)).map_err(|e| Error::io(path, e))
}

pub fn read_tns(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tns(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn header_layout_is_bit_exact() {
        let arr = Array::from_shape_vec(IxDyn(&[2, 1]), vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_tns(&arr.view());
        assert_eq!(&bytes[..8], b"OIETNS01");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x.tns");
        assert!(decode_tns(b"NOTMAGIC\0\0\0\0", p).is_err());
        let arr = Array::from_shape_vec(IxDyn(&[3]), vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut bytes = encode_tns(&arr.view());
        bytes.pop();
        let err = decode_tns(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("x.tns"));
    }

    #[test]
    fn non_standard_layout_is_written_row_major() {
        let arr = Array::from_shape_vec((2, 3), vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let t = arr.t().to_owned();
        let bytes = encode_tns(&arr.t().into_dyn());
        let back = decode_tns(&bytes, Path::new("t")).unwrap();
        assert_eq!(back, t.into_dyn());
    }
}
