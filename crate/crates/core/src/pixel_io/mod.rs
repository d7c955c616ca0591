//! Binary PPM/PGM codec and in-memory image types.
//!
//! Only the binary variants with `maxval = 255` are supported: `P6` for
//! three-channel images and `P5` for single-channel images and label maps.
//! The writer emits a single-space header (`P6\n<w> <h>\n255\n`) so a
//! read/write round trip is byte-identical.

mod scene;

pub use scene::{class_color, generate_scene, plan_shapes, SceneSpec, Shape, ShapeKind};

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: expected binary P5 or P6")]
    UnsupportedFormat,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: u32 },
}

pub type Result<T> = std::result::Result<T, PixelError>;

/// Row-major 8-bit image with 1 or 3 interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(PixelError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(PixelError::InvalidImage("zero dimension".into()));
        }
        if data.len() != width * height * channels {
            return Err(PixelError::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image filled with a single color (`color.len()` is the channel count).
    pub fn filled(width: usize, height: usize, color: &[u8]) -> Result<Self> {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(width * height * color.len())
            .collect();
        Self::new(width, height, color.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[u8]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    /// Sub-image `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(PixelError::InvalidImage(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let row_len = w * self.channels;
        let mut data = Vec::with_capacity(h * row_len);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + row_len]);
        }
        Self::new(w, h, self.channels, data)
    }

    /// Three-channel copy; grayscale samples are replicated.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// Row-major per-pixel class indices (at most 256 classes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(PixelError::InvalidImage(format!(
                "label map {width}x{height} with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Checks every label is below `num_classes`.
    pub fn check_classes(&self, num_classes: u32) -> Result<()> {
        match self.labels.iter().find(|&&l| u32::from(l) >= num_classes) {
            Some(&l) => Err(PixelError::LabelOutOfRange {
                label: u32::from(l),
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts (length 256).
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.labels.clone(),
        }
    }

    pub fn from_image(image: Image) -> Result<Self> {
        if image.channels != 1 {
            return Err(PixelError::InvalidImage(
                "label maps must be single-channel".into(),
            ));
        }
        Self::new(image.width, image.height, image.data)
    }
}

/// Encodes an image as binary PGM/PPM bytes.
pub fn encode_image(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let header = format!("{magic}\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.data);
    out
}

/// Decodes binary PGM/PPM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(PixelError::UnsupportedFormat),
    };
    let mut cursor = HeaderCursor { bytes, pos: 2 };
    let width = cursor.field("width")?;
    let height = cursor.field("height")?;
    let maxval = cursor.field("maxval")?;
    // Exactly one whitespace byte separates maxval from the payload.
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => {
            return Err(PixelError::MalformedHeader(
                "missing separator after maxval".into(),
            ))
        }
    }
    if maxval != 255 {
        return Err(PixelError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PixelError::MalformedHeader("zero dimension".into()));
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PixelError::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[cursor.pos..];
    if payload.len() < expected {
        return Err(PixelError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Image::new(
        width as usize,
        height as usize,
        channels,
        payload[..expected].to_vec(),
    )
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn field(&mut self, name: &str) -> Result<u32> {
        let start = self.pos;
        self.skip_whitespace_and_comments();
        if self.pos == start {
            return Err(PixelError::MalformedHeader(format!(
                "expected whitespace before {name}"
            )));
        }
        let digits_start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(PixelError::MalformedHeader(format!("missing {name}")));
        }
        std::str::from_utf8(&self.bytes[digits_start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PixelError::MalformedHeader(format!("{name} out of range")))
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PixelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image)).map_err(|source| PixelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Label maps are stored as P5 graymaps with the class index as gray value.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_image(read_image(path)?)
}

pub fn write_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_image(&labels.to_image(), path)
}
