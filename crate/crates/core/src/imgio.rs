//! Image types plus IDX (MNIST) input and binary PGM output.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::with_channels(width, height, 1, pixels)
    }

    pub fn with_channels(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{}x{}x{} image needs {} pixels, got {}",
                width,
                height,
                channels,
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels: 1,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Per-pixel background/foreground decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    Background,
    Foreground,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteImage {
    pub width: usize,
    pub height: usize,
    pub markers: Vec<Marker>,
}

impl SilhouetteImage {
    pub fn filled(width: usize, height: usize, marker: Marker) -> Self {
        Self {
            width,
            height,
            markers: vec![marker; width * height],
        }
    }

    /// Golden markers of an image: value 0 is background, anything else is
    /// foreground.
    pub fn from_golden(img: &Image) -> Self {
        Self {
            width: img.width,
            height: img.height,
            markers: img
                .pixels
                .iter()
                .map(|&p| {
                    if p == 0 {
                        Marker::Background
                    } else {
                        Marker::Foreground
                    }
                })
                .collect(),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.markers
            .iter()
            .filter(|m| **m == Marker::Foreground)
            .count()
    }
}

pub fn binarize_markers(sil: &SilhouetteImage) -> Image {
    Image {
        width: sil.width,
        height: sil.height,
        channels: 1,
        pixels: sil
            .markers
            .iter()
            .map(|m| match m {
                Marker::Background => 0,
                Marker::Foreground => 255,
            })
            .collect(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at byte {at}")))
}

/// Parses an IDX image file already held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX image magic must be 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if count > 0 && (rows == 0 || cols == 0) {
        return Err(Error::Format(format!("bad IDX dimensions {rows}x{cols}")));
    }
    let per = rows * cols;
    let payload = &bytes[16..];
    let need = count
        .checked_mul(per)
        .ok_or_else(|| Error::Format("IDX size overflows".into()))?;
    if payload.len() < need {
        return Err(Error::Length(format!(
            "IDX declares {count} images of {rows}x{cols} ({need} bytes) but payload has {}",
            payload.len()
        )));
    }
    Ok(payload[..need]
        .chunks_exact(per.max(1))
        .take(count)
        .map(|px| Image {
            width: cols,
            height: rows,
            channels: 1,
            pixels: px.to_vec(),
        })
        .collect())
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes).map_err(|e| e.in_file(path))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX label magic must be 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Length(format!(
            "IDX declares {count} labels but payload has {}",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes).map_err(|e| e.in_file(path))
}

/// Serializes same-sized single-channel images as an IDX image file.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (w, h) = images.first().map(Image::dims).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * w * h);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        if img.dims() != (w, h) || img.channels != 1 {
            return Err(Error::Dimension(
                "IDX files hold same-sized single-channel images".into(),
            ));
        }
        out.extend_from_slice(&img.pixels);
    }
    Ok(out)
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::Unsupported(format!(
            "PGM output needs 1 channel, image has {}",
            img.channels
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

pub fn write_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(img)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("PGM header truncated".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("only binary P5 PGM is supported".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PGM maxval {maxval}, need 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height;
    let raster = bytes.get(start..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(Error::Length(format!(
            "PGM raster needs {need} bytes, found {}",
            raster.len()
        )));
    }
    Image::new(width, height, raster[..need].to_vec())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| e.in_file(path))
}

/// Tiles equally sized images into a grid, `cols` per row, separated by a
/// one-pixel gutter of value 128.
pub fn tile(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("no images to tile".into()))?;
    let (w, h) = first.dims();
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let gw = cols * (w + 1) - 1;
    let gh = rows * (h + 1) - 1;
    let mut grid = Image::filled(gw, gh, 128);
    for (i, img) in images.iter().enumerate() {
        if img.dims() != (w, h) || img.channels != 1 {
            return Err(Error::Dimension("tiled images must match".into()));
        }
        let ox = (i % cols) * (w + 1);
        let oy = (i / cols) * (h + 1);
        for y in 0..h {
            for x in 0..w {
                grid.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn two_three_by_three_images() {
        let payload: Vec<u8> = (0..18).collect();
        let imgs = parse_idx_images(&idx_bytes(2, 3, 3, &payload)).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].pixels, (0..9).collect::<Vec<u8>>());
        assert_eq!(imgs[1].pixels, (9..18).collect::<Vec<u8>>());
        assert_eq!(imgs[0].channels, 1);
    }

    #[test]
    fn zero_images_is_empty() {
        assert!(parse_idx_images(&idx_bytes(0, 28, 28, &[])).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = idx_bytes(1, 2, 2, &[1, 2, 3, 4]);
        b[3] = 0x01;
        assert!(matches!(parse_idx_images(&b), Err(Error::Format(_))));
        let b = idx_bytes(2, 2, 2, &[1, 2, 3, 4, 5]);
        assert!(matches!(parse_idx_images(&b), Err(Error::Length(_))));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Format(_))));
    }

    #[test]
    fn labels_parse() {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 2, 1]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 2, 1]);
        b.pop();
        assert!(matches!(parse_idx_labels(&b), Err(Error::Length(_))));
    }

    #[test]
    fn minimal_pgm() {
        let img = Image::new(1, 1, vec![0]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(bytes, b"P5\n1 1\n255\n\x00");
        assert_eq!(bytes.len(), 12);
    }

    #[test]
    fn white_mnist_sized_pgm() {
        let img = Image::filled(28, 28, 255);
        let bytes = encode_pgm(&img).unwrap();
        let header = b"P5\n28 28\n255\n";
        assert_eq!(bytes.len(), header.len() + 784);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn pgm_rejects_multichannel() {
        let img = Image::with_channels(2, 2, 3, vec![0; 12]).unwrap();
        assert!(matches!(encode_pgm(&img), Err(Error::Unsupported(_))));
    }

    #[test]
    fn pgm_with_comment_parses() {
        let img = parse_pgm(b"P5\n# made by hand\n2 1\n255\n\x05\xfa").unwrap();
        assert_eq!(img.pixels, vec![5, 250]);
        assert!(matches!(
            parse_pgm(b"P5\n2 1\n65535\n\x00\x00\x00\x00"),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn markers_binarize() {
        let bg = SilhouetteImage::filled(3, 2, Marker::Background);
        assert!(binarize_markers(&bg).pixels.iter().all(|&p| p == 0));
        let fg = SilhouetteImage::filled(3, 2, Marker::Foreground);
        assert!(binarize_markers(&fg).pixels.iter().all(|&p| p == 255));

        let (w, h) = (5, 4);
        let markers = (0..w * h)
            .map(|i| {
                if (i % w + i / w) % 2 == 0 {
                    Marker::Foreground
                } else {
                    Marker::Background
                }
            })
            .collect();
        let img = binarize_markers(&SilhouetteImage {
            width: w,
            height: h,
            markers,
        });
        for y in 0..h {
            for x in 0..w {
                let want = if (x + y) % 2 == 0 { 255 } else { 0 };
                assert_eq!(img.get(x, y), want);
            }
        }
    }

    #[test]
    fn tile_layout() {
        let a = Image::filled(2, 2, 10);
        let b = Image::filled(2, 2, 20);
        let g = tile(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(g.dims(), (5, 5));
        assert_eq!(g.get(0, 0), 10);
        assert_eq!(g.get(2, 0), 128);
        assert_eq!(g.get(3, 1), 20);
        assert_eq!(g.get(1, 4), 20);
        assert_eq!(g.get(4, 4), 128);
    }
}
