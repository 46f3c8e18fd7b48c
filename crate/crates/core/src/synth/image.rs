//! Channels-first float images and the "VXIM" raw tensor container.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! offset size  field
//! 0      4     magic "VXIM"
//! 4      4     rank (u32, 1..=4)
//! 8      8     four u16 extents; slots past the rank hold 1
//! 16     ...   payload: f32 values, row-major
//! ```

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VXIM";

/// RGB image, channels-first `[3, h, w]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> Self {
        ImageBuf { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Mean absolute difference per value; shapes must match.
    pub fn l1_distance(&self, other: &ImageBuf) -> f64 {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        total / self.data.len() as f64
    }

    /// `[1, 3, h, w]` tensor for the network input.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f32(v)).collect();
        Tensor::from_vec(&[1, 3, self.h, self.w], data, false)
    }
}

/// Write a rank-1..4 f32 tensor.
pub fn save_vxim(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::format(format!("vxim: rank {} out of range 1..=4", shape.len())));
    }
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::format(format!(
            "vxim: shape {shape:?} wants {numel} values, got {}",
            data.len()
        )));
    }
    for &e in shape {
        if e == 0 || e > u16::MAX as usize {
            return Err(Error::format(format!("vxim: extent {e} out of u16 range")));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(shape.len() as u32).to_le_bytes())?;
    for i in 0..4 {
        let e = shape.get(i).copied().unwrap_or(1) as u16;
        f.write_all(&e.to_le_bytes())?;
    }
    for &v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Read a tensor written by [`save_vxim`].
pub fn load_vxim(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| Error::format(format!("vxim {}: truncated header", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(Error::format(format!("vxim {}: bad magic", path.display())));
    }
    let rank = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::format(format!("vxim {}: rank {rank} out of range", path.display())));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = u16::from_le_bytes(header[8 + 2 * i..10 + 2 * i].try_into().unwrap()) as usize;
        if e == 0 {
            return Err(Error::format(format!("vxim {}: zero extent", path.display())));
        }
        shape.push(e);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    f.read_exact(&mut payload)
        .map_err(|_| Error::format(format!("vxim {}: truncated payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::format(format!("vxim {}: trailing bytes", path.display())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

/// Load an image saved as `[3, h, w]`.
pub fn load_image(path: &Path) -> Result<ImageBuf> {
    let (shape, data) = load_vxim(path)?;
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::format(format!(
            "vxim {}: expected [3, h, w] image, got {shape:?}",
            path.display()
        )));
    }
    Ok(ImageBuf { h: shape[1], w: shape[2], data })
}

pub fn save_image(path: &Path, img: &ImageBuf) -> Result<()> {
    save_vxim(path, &[3, img.h, img.w], &img.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vxim_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vxim");
        let data = vec![0.0f32, -0.0, 1.5e30, f32::MIN_POSITIVE, -7.25];
        save_vxim(&path, &[5], &data).unwrap();
        let (shape, back) = load_vxim(&path).unwrap();
        assert_eq!(shape, vec![5]);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn vxim_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vxim");
        save_vxim(&path, &[2, 3], &vec![1.0; 6]).unwrap();
        // Bad magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_vxim(&path).is_err());
        // Truncated payload.
        save_vxim(&path, &[2, 3], &vec![1.0; 6]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_vxim(&path).is_err());
    }

    #[test]
    fn image_roundtrip_and_tensor_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.vxim");
        let mut img = ImageBuf::new(4, 6);
        img.set(1, 2, 3, 0.5);
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);
        let t: Tensor<f32> = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 4, 6]);
    }
}
