//! Binary PPM (P6) and PGM (P5) images, 8-bit with maxval 255.
//!
//! Pixel bytes map to reals as `2v/255 − 1`, so 0 → −1 and 255 → +1.
//! Writing clamps to `[−1, 1]` and rounds to the nearest byte. Masks are
//! PGM files thresholded at 128.

use std::path::Path;

use pfbdiff_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("malformed image header: {0}")]
    Malformed(String),
    #[error("truncated image payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// A decoded netpbm raster: `channels` is 1 for P5 and 3 for P6.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Malformed(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Malformed(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) if m.first() == Some(&b'P') => {
            return Err(ImageError::Unsupported(format!("netpbm variant {}", String::from_utf8_lossy(m))))
        }
        _ => return Err(ImageError::Malformed("missing P5/P6 magic".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval}; only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Malformed(format!("empty {width}x{height} image")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(ImageError::Malformed("header must end in one whitespace byte".into())),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageError::Malformed("image dimensions overflow".into()))?;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated { expected, found: payload.len() });
    }
    Ok(Raster { channels, width, height, pixels: payload[..expected].to_vec() })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn byte_to_real(v: u8) -> f32 {
    2.0 * f32::from(v) / 255.0 - 1.0
}

pub fn real_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round() as u8
}

/// Planar `C × H × W` tensor in `[−1, 1]`.
pub fn raster_to_tensor(r: &Raster) -> Tensor {
    let (c, plane) = (r.channels, r.width * r.height);
    Tensor::from_fn(&[c, r.height, r.width], |i| byte_to_real(r.pixels[(i % plane) * c + i / plane]))
}

pub fn tensor_to_raster(t: &Tensor) -> Result<Raster> {
    let (c, h, w) = match *t.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        [h, w] => (1, h, w),
        ref s => return Err(ImageError::Unsupported(format!("cannot store tensor of shape {s:?} as an image"))),
    };
    let plane = h * w;
    let pixels = (0..c * plane).map(|i| real_to_byte(t.data()[(i % c) * plane + i / c])).collect();
    Ok(Raster { channels: c, width: w, height: h, pixels })
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    Ok(raster_to_tensor(&decode(bytes)?))
}

pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    Ok(encode(&tensor_to_raster(t)?))
}

/// `H × W` binary mask: bytes ≥ 128 become 1.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor> {
    let r = decode(bytes)?;
    if r.channels != 1 {
        return Err(ImageError::Unsupported("masks must be single-channel PGM (P5)".into()));
    }
    Ok(Tensor::from_fn(&[r.height, r.width], |i| if r.pixels[i] >= 128 { 1.0 } else { 0.0 }))
}

/// Writes a binary mask as a P5 image with values 0 and 255.
pub fn encode_mask(m: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = m.dims2().map_err(|e| ImageError::Unsupported(e.to_string()))?;
    let pixels = m.data().iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect();
    Ok(encode(&Raster { channels: 1, width: w, height: h, pixels }))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_image(t)?)?)
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    decode_mask(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(byte_to_real(0), -1.0);
        assert_eq!(byte_to_real(255), 1.0);
        assert_eq!(real_to_byte(-1.0), 0);
        assert_eq!(real_to_byte(1.0), 255);
        assert_eq!(real_to_byte(7.0), 255);
        assert_eq!(real_to_byte(f32::NAN), 0);
    }

    #[test]
    fn every_byte_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(real_to_byte(byte_to_real(v)), v);
        }
    }

    #[test]
    fn mask_threshold() {
        let bytes = encode(&Raster { channels: 1, width: 2, height: 1, pixels: vec![128, 127] });
        assert_eq!(decode_mask(&bytes).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6 # colour\n# size next\n2 1 # w h\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 10, 20, 30]);
        let r = decode(&bytes).unwrap();
        assert_eq!((r.channels, r.width, r.height), (3, 2, 1));
        let t = raster_to_tensor(&r);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], byte_to_real(10));
        assert_eq!(t.data()[4], 1.0);
    }

    #[test]
    fn truncated_payload() {
        let bytes = b"P5\n4 4\n255\n\x00\x01".to_vec();
        assert!(matches!(decode(&bytes), Err(ImageError::Truncated { expected: 16, found: 2 })));
    }

    #[test]
    fn malformed_headers() {
        for bad in [&b"P7\n1 1\n255\n\x00"[..], b"XY", b"P5\n1\n", b"P5\n1 1 255\x00", b"P5\n0 1\n255\n"] {
            assert!(decode(bad).is_err(), "{:?}", String::from_utf8_lossy(bad));
        }
        assert!(matches!(decode(b"P5\n1 1\n65535\n\x00\x00"), Err(ImageError::Unsupported(_))));
    }

    #[test]
    fn colour_masks_rejected() {
        let bytes = encode(&Raster { channels: 3, width: 1, height: 1, pixels: vec![255; 3] });
        assert!(matches!(decode_mask(&bytes), Err(ImageError::Unsupported(_))));
    }
}
