//! Binary NetPBM codec: P5 (grayscale) and P6 (RGB), 8-bit, maxval 255.

use super::DataError;

/// Decoded 8-bit pixmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pixmap {
    /// Row-major grayscale bytes.
    Gray { h: usize, w: usize, data: Vec<u8> },
    /// Row-major interleaved RGB bytes.
    Rgb { h: usize, w: usize, data: Vec<u8> },
}

impl Pixmap {
    pub fn size(&self) -> (usize, usize) {
        match self {
            Pixmap::Gray { h, w, .. } | Pixmap::Rgb { h, w, .. } => (*h, *w),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> DataError {
        DataError::Parse { offset: self.pos, message: message.into() }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skip whitespace and `#` comments between header fields.
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self) -> Result<u32, DataError> {
        self.skip_separators();
        let start = self.pos;
        let mut value: u32 = 0;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as u32))
                    .ok_or_else(|| self.err("header number overflows"))?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err("expected a decimal header field"));
        }
        Ok(value)
    }
}

/// Decode a binary P5/P6 file.
pub fn decode(bytes: &[u8]) -> Result<Pixmap, DataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("file too short for a NetPBM magic"));
    }
    let rgb = match &bytes[0..2] {
        b"P5" => false,
        b"P6" => true,
        _ => return Err(cur.err("magic is not P5 or P6")),
    };
    cur.pos = 2;

    let w = cur.read_number()? as usize;
    let h = cur.read_number()? as usize;
    let maxval = cur.read_number()?;
    if maxval != 255 {
        return Err(DataError::UnsupportedDepth { maxval });
    }
    // exactly one whitespace byte separates the header from the raster
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace before raster")),
    }
    if h == 0 || w == 0 {
        return Err(cur.err("zero image dimension"));
    }

    let expect = h * w * if rgb { 3 } else { 1 };
    let rest = &bytes[cur.pos..];
    if rest.len() < expect {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "raster truncated: expected {expect} bytes, found {}",
            rest.len()
        )));
    }
    let data = rest[..expect].to_vec();
    Ok(if rgb {
        Pixmap::Rgb { h, w, data }
    } else {
        Pixmap::Gray { h, w, data }
    })
}

pub fn encode(pixmap: &Pixmap) -> Vec<u8> {
    let (magic, h, w, data) = match pixmap {
        Pixmap::Gray { h, w, data } => ("P5", h, w, data),
        Pixmap::Rgb { h, w, data } => ("P6", h, w, data),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_all_white_p6() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255u8; 12]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img, Pixmap::Rgb { h: 2, w: 2, data: vec![255; 12] });
    }

    #[test]
    fn decode_handles_comments() {
        let mut bytes = b"P5 # comment\n# another\n 3\t2 # inline\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 5]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img, Pixmap::Gray { h: 2, w: 3, data: vec![0, 1, 2, 3, 4, 5] });
    }

    #[test]
    fn errors_carry_byte_offsets() {
        match decode(b"P7\n1 1\n255\n\x00") {
            Err(DataError::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let short = b"P5\n2 2\n255\n\x00\x00";
        match decode(short) {
            Err(DataError::Parse { offset, message }) => {
                assert_eq!(offset, short.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_255_maxval() {
        assert!(matches!(
            decode(b"P5\n1 1\n65535\n\x00\x00"),
            Err(DataError::UnsupportedDepth { maxval: 65535 })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(
            h in 1usize..12,
            w in 1usize..12,
            rgb in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let n = h * w * if rgb { 3 } else { 1 };
            let mut state = seed;
            let data: Vec<u8> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 56) as u8
                })
                .collect();
            let img = if rgb {
                Pixmap::Rgb { h, w, data }
            } else {
                Pixmap::Gray { h, w, data }
            };
            let decoded = decode(&encode(&img)).unwrap();
            prop_assert_eq!(decoded, img);
        }
    }
}
