//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a channel-major `3×H×W` image with values in `[0, 1]`.
pub fn encode_ppm(height: usize, width: usize, image: &[f64]) -> Result<Vec<u8>> {
    let plane = height * width;
    if image.len() != 3 * plane {
        return Err(Error::dim("encode_ppm", &[3, height, width], &[image.len()]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(height: usize, width: usize, labels: &[u8]) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::dim("encode_pgm", &[height, width], &[labels.len()]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            reason: reason.into(),
        }
    }

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
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse()
            .map_err(|_| Error::Format {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.get(..2) != Some(&magic[..]) {
        return Err(cur.fail(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.fail(format!("maxval must be 255, got {maxval}")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.fail("expected a single whitespace byte before the payload"));
    }
    if width == 0 || height == 0 {
        return Err(cur.fail("zero image extent"));
    }
    Ok(Header {
        width,
        height,
        payload_start: cur.pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let len = header.width * header.height * channels;
    let end = header.payload_start + len;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len(),
            reason: format!("truncated payload: expected {len} bytes"),
        });
    }
    Ok(&bytes[header.payload_start..end])
}

/// Returns `(height, width, 3×H×W image)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let header = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &header, 3)?;
    let plane = header.width * header.height;
    let mut image = vec![0.0; 3 * plane];
    for (i, &b) in data.iter().enumerate() {
        image[(i % 3) * plane + i / 3] = b as f64 / 255.0;
    }
    Ok((header.height, header.width, image))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?;
    Ok((header.height, header.width, data.to_vec()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, height: usize, width: usize, image: &[f64]) -> Result<()> {
    write(path, &encode_ppm(height, width, image)?)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    write(path, &encode_pgm(height, width, labels)?)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_ppm(&read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_payload() {
        let bytes = encode_ppm(1, 1, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn label_round_trip_is_exact() {
        let labels: Vec<u8> = (0..=255).collect();
        let bytes = encode_pgm(16, 16, &labels).unwrap();
        assert_eq!(decode_pgm(&bytes).unwrap(), (16, 16, labels));
    }

    #[test]
    fn image_round_trip_within_half_step() {
        let image: Vec<f64> = (0..3 * 20).map(|i| (i as f64 * 0.137).fract()).collect();
        let (h, w, back) = decode_ppm(&encode_ppm(4, 5, &image).unwrap()).unwrap();
        assert_eq!((h, w), (4, 5));
        for (a, b) in image.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        assert_eq!(decode_pgm(bytes).unwrap(), (1, 2, vec![1, 2]));
    }

    #[test]
    fn errors_report_byte_offsets() {
        let offset = |bytes: &[u8]| match decode_pgm(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(b"P6\n1 1\n255\n\x00"), 0);
        assert_eq!(offset(b"P5\n1 x\n255\n\x00"), 5);
        assert_eq!(offset(b"P5\n1 1\n15\n\x00"), 9);
        assert_eq!(offset(b"P5\n2 2\n255\n\x00\x00"), 13);
    }
}
