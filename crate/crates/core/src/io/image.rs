//! Binary PPM (P6) / PGM (P5) images and segmentation overlays.

use std::path::Path;

use super::FormatError;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// 8-bit image, gray (1 channel) or RGB (3 channels), row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || width == 0 || height == 0 {
            return Err(Error::InvalidDims(Dims::new(height, width, channels)));
        }
        if data.len() != width * height * channels {
            return Err(Error::DataLength { expected: width * height * channels, actual: data.len() });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn gray_from_mask(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        Self::new(width, height, 1, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width, self.channels)
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims(), self.data.iter().map(|&v| v as f32 / 255.0).collect())
            .expect("image dims are validated")
    }

    /// Gray image thresholded at 128 (ground-truth masks).
    pub fn to_mask(&self) -> Vec<bool> {
        self.data.chunks(self.channels).map(|px| px[0] >= 128).collect()
    }

    pub fn rgb(&self, i: usize) -> [u8; 3] {
        if self.channels == 3 {
            [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
        } else {
            [self.data[i]; 3]
        }
    }

    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, FormatError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FormatError::BadHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::BadHeader(format!("{what} out of range")))
    }
}

/// Parses a binary P5 or P6 image with maxval 255.
pub fn parse_pnm(bytes: &[u8]) -> Result<ImageBuffer, FormatError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(FormatError::BadHeader("missing P5/P6 magic".into())),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(FormatError::BadHeader("magic must be followed by whitespace".into()));
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(FormatError::BadHeader("zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(FormatError::BadMaxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(FormatError::BadHeader("missing separator after maxval".into())),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| FormatError::BadHeader("image too large".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(FormatError::ImageTruncated { expected, actual: payload.len() });
    }
    Ok(ImageBuffer { width, height, channels, data: payload[..expected].to_vec() })
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    Ok(parse_pnm(&std::fs::read(path)?)?)
}

pub fn save_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let rgb = if img.channels == 3 {
        img.clone()
    } else {
        ImageBuffer { channels: 3, data: img.data.iter().flat_map(|&v| [v; 3]).collect(), ..*img }
    };
    std::fs::write(path, rgb.to_pnm_bytes())?;
    Ok(())
}

pub fn save_pgm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::InvalidOperand("PGM output needs a single-channel image".into()));
    }
    std::fs::write(path, img.to_pnm_bytes())?;
    Ok(())
}

const GREEN: [u8; 3] = [0, 255, 0];
const RED: [u8; 3] = [255, 0, 0];
const BLUE: [u8; 3] = [0, 0, 255];

/// Colors prediction/ground-truth agreement onto the image.
///
/// With ground truth: green = hit, red = missed road, blue = false road,
/// original pixel elsewhere. Without: predicted road blended 50% with green.
pub fn render_overlay(image: &ImageBuffer, pred: &[bool], gt: Option<&[bool]>) -> Result<ImageBuffer> {
    let n = image.width * image.height;
    if pred.len() != n || gt.is_some_and(|g| g.len() != n) {
        return Err(Error::InvalidOperand(format!("overlay masks must have {n} pixels")));
    }
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        let px = image.rgb(i);
        let out = match gt {
            Some(gt) => match (pred[i], gt[i]) {
                (true, true) => GREEN,
                (false, true) => RED,
                (true, false) => BLUE,
                (false, false) => px,
            },
            None if pred[i] => std::array::from_fn(|c| (px[c] as u16 + GREEN[c] as u16).div_ceil(2) as u8),
            None => px,
        };
        data.extend_from_slice(&out);
    }
    ImageBuffer::new(image.width, image.height, 3, data)
}

pub fn save_overlay(path: impl AsRef<Path>, image: &ImageBuffer, pred: &[bool], gt: Option<&[bool]>) -> Result<()> {
    save_ppm(path, &render_overlay(image, pred, gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_p6() {
        let img = parse_pnm(b"P6 1 1 255 \x01\x02\x03").unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 3));
        assert_eq!(img.data, [1, 2, 3]);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let bytes = b"P5\n# made by hand\n  2\t# width\n1\r\n255\n\x00\xff";
        let img = parse_pnm(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, [0, 255]);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_pnm(b"P3 1 1 255\n1 2 3"), Err(FormatError::BadHeader(_))));
        assert!(matches!(parse_pnm(b"P6 1 1 65535\n123456"), Err(FormatError::BadMaxval(65535))));
        assert!(matches!(parse_pnm(b"P6 2 1 255\nabc"), Err(FormatError::ImageTruncated { expected: 6, actual: 3 })));
        assert!(matches!(parse_pnm(b"P6 x 1 255\n"), Err(FormatError::BadHeader(_))));
        assert!(matches!(parse_pnm(b"P6 1 1 255"), Err(FormatError::BadHeader(_))));
    }

    #[test]
    fn pnm_round_trip() {
        let img = ImageBuffer::new(2, 2, 3, (0..12).collect()).unwrap();
        assert_eq!(parse_pnm(&img.to_pnm_bytes()).unwrap(), img);
    }

    #[test]
    fn overlay_rule_table() {
        let img = ImageBuffer::new(2, 2, 3, vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120]).unwrap();
        let pred = [true, true, false, false];
        let gt = [true, false, true, false];
        let out = render_overlay(&img, &pred, Some(&gt)).unwrap();
        assert_eq!(out.data, [0, 255, 0, 0, 0, 255, 255, 0, 0, 100, 110, 120]);

        let tinted = render_overlay(&img, &pred, None).unwrap();
        assert_eq!(tinted.data, [5, 138, 15, 20, 153, 30, 70, 80, 90, 100, 110, 120]);
    }

    #[test]
    fn perfect_overlay_has_no_error_colors() {
        let img = ImageBuffer::new(3, 1, 1, vec![0, 128, 255]).unwrap();
        let mask = [true, false, true];
        let out = render_overlay(&img, &mask, Some(&mask)).unwrap();
        for px in out.data.chunks(3) {
            assert_ne!(px, RED);
            assert_ne!(px, BLUE);
        }
    }
}
