//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(height: usize, width: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], what: &str) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::data(format!(
            "not a binary {what}: expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(format!("truncated {what} header")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(format!("bad number in {what} header")))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::data(format!(
            "missing separator after {what} header"
        )));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::data(format!(
            "{what} maxval {maxval} unsupported (need 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::data(format!("{what} has zero size")));
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", "PPM")?;
    let len = h.width * h.height * 3;
    let data = bytes
        .get(h.data_start..h.data_start + len)
        .ok_or_else(|| Error::data(format!("PPM pixel data truncated (need {len} bytes)")))?;
    Ok(RgbImage {
        height: h.height,
        width: h.width,
        data: data.to_vec(),
    })
}

/// Returns `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes, b"P5", "PGM")?;
    let len = h.width * h.height;
    let data = bytes
        .get(h.data_start..h.data_start + len)
        .ok_or_else(|| Error::data(format!("PGM pixel data truncated (need {len} bytes)")))?;
    Ok((h.height, h.width, data.to_vec()))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(height, width, data)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\xff";
        let (h, w, d) = decode_pgm(bytes).unwrap();
        assert_eq!((h, w, d), (1, 2, vec![7, 255]));
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(2, 3);
        img.set(1, 2, [10, 20, 30]);
        img.set(0, 0, [255, 0, 1]);
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn rejects_wrong_magic_and_maxval() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
