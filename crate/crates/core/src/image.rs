//! 8-bit grayscale images and binary portable graymap (P5) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tinynet::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Quantize values in `[0, 1]` (clamped) to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(width, height, pixels)
    }

    /// `(1, height, width)` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("pixel count checked at construction")
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("malformed PGM: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("expected magic P5"));
        }
        let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(what));
        let width = parse(fields[1], "width")?;
        let height = parse(fields[2], "height")?;
        if parse(fields[3], "maxval")? != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        if data.len() != width * height {
            return Err(bad("raster size does not match header"));
        }
        GrayImage::new(width, height, data.to_vec())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayImage::from_pgm_bytes(&bytes).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn mean_in(&self, mask: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if mask(x, y) {
                    sum += self.pixels[y * self.width + x] as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        assert_eq!(GrayImage::from_pgm_bytes(&img.to_pgm_bytes()).unwrap(), img);
    }

    #[test]
    fn pgm_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 2]);
        assert_eq!(GrayImage::from_pgm_bytes(&bytes).unwrap().pixels, vec![1, 2]);
    }

    #[test]
    fn malformed_pgm() {
        assert!(GrayImage::from_pgm_bytes(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::from_pgm_bytes(b"P5\n2 2\n255\n\x01").is_err());
        assert!(GrayImage::from_pgm_bytes(b"P5\n2").is_err());
    }

    #[test]
    fn unit_quantization() {
        let img = GrayImage::from_unit(3, 1, &[0.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data()[2], 1.0);
    }
}
