//! 8-bit RGB frames plus PPM/PGM export for eyeballing artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                context: "Image::from_raw".into(),
                expected: format!("{} bytes", width * height * 3),
                got: format!("{}", data.len()),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", image.width, image.height)?;
    f.write_all(&image.data)?;
    Ok(())
}

/// Binary PGM (P5) from bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::ShapeMismatch {
            context: "write_pgm".into(),
            expected: format!("{} bytes", width * height),
            got: format!("{}", gray.len()),
        });
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(gray)?;
    Ok(())
}

/// A [0,1] map exported as 8-bit PGM plus a raw little-endian f32 sidecar
/// (`<path>.f32`) holding the exact values.
pub fn write_map<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let gray: Vec<u8> = map
        .data()
        .iter()
        .map(|v| {
            let x = v.to_f64_lossy().clamp(0.0, 1.0);
            (x * 255.0).round() as u8
        })
        .collect();
    write_pgm(path, w, h, &gray)?;
    let mut raw = Vec::with_capacity(map.len() * 4);
    for v in map.data() {
        raw.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    fs::write(path.with_extension("f32"), raw)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let dir = std::env::temp_dir().join(format!("lanekeep-img-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut img = Image::new(2, 2);
        img.put(0, 0, [255, 0, 0]);
        img.put(1, 1, [0, 0, 255]);
        let p = dir.join("t.ppm");
        write_ppm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }
}
