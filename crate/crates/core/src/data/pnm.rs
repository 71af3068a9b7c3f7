//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Field;

/// 8-bit raster, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape("image", format!("{channels} channels; only 1 or 3 are supported")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{width}x{height}x{channels} needs {} bytes, got {}", width * height * channels, pixels.len()),
            ));
        }
        Ok(ImageU8 { width, height, channels, pixels })
    }

    pub fn gray(field: &Field<u8>) -> Self {
        ImageU8 { width: field.width(), height: field.height(), channels: 1, pixels: field.data().to_vec() }
    }

    /// One channel as a field.
    pub fn channel(&self, c: usize) -> Field<u8> {
        assert!(c < self.channels);
        Field::from_fn(self.height, self.width, |y, x| self.pixels[(y * self.width + x) * self.channels + c])
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
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
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { offset: start, msg: format!("{what} out of range") })
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageU8> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) if m[0] == b'P' => {
            return Err(cur.err(format!("unsupported format {}; only binary P5/P6 are read", String::from_utf8_lossy(m))))
        }
        _ => return Err(cur.err("missing PNM magic")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse { offset: maxval_at, msg: format!("maxval {maxval}; only 255 is supported") });
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image extent"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte before the payload")),
    }
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    ImageU8::new(width, height, channels, payload[..need].to_vec())
}

pub fn encode_pnm(image: &ImageU8) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub fn write_pnm(image: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(field: &Field<u8>, path: impl AsRef<Path>) -> Result<()> {
    write_pnm(&ImageU8::gray(field), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_minimal_p5() {
        let mut bytes = b"P5 2 2 255 ".to_vec();
        bytes.extend_from_slice(&[0, 85, 170, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.pixels, vec![0, 85, 170, 255]);
    }

    #[test]
    fn tolerates_comments() {
        let mut bytes = b"P6\n# made by hand\n1 # width\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_unsupported_and_malformed() {
        assert!(decode_pnm(b"P2 1 1 255 7").is_err());
        assert!(decode_pnm(b"P7\nWIDTH 1\n").is_err());
        let err = decode_pnm(b"P5 1 1 65535 \x00\x00").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 7, .. }), "{err}");
        let err = decode_pnm(b"P5 4 4 255 \x00\x01").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(decode_pnm(b"P5 x 4 255 ").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(w in 1usize..12, h in 1usize..12, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let mut s = seed;
            let pixels = (0..w * h * c).map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 56) as u8 }).collect();
            let img = ImageU8::new(w, h, c, pixels).unwrap();
            prop_assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
        }
    }
}
