//! Dense activation grids (PFM) and binary pixel masks (PGM).
//!
//! PFM: grayscale `Pf` only. The scale line's sign gives the byte order
//! (negative = little-endian) and rows are stored bottom-to-top. Grids are
//! held top-to-bottom in memory. Files are always written little-endian with
//! scale `-1.0`.
//!
//! PGM: binary `P5` with maxval ≤ 255; a pixel is set when its value is at
//! least half the range (≥ 128 for maxval 255). Masks are written as 0/255.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl FloatGrid {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("grid dimensions must be positive".into()));
        }
        if width * height != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} grid with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid contains non-finite values".into()));
        }
        Ok(FloatGrid {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major, top row first.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("mask dimensions must be positive".into()));
        }
        if width * height != bits.len() {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask with {} pixels",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Header tokenizer shared by the two netpbm-style formats.
struct Header<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(data: &'a [u8]) -> Self {
        Header { data, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.data.len() {
            let c = self.data[self.pos];
            if c == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::InvalidInput("truncated header".into()));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| Error::InvalidInput("non-ascii header".into()))
    }

    fn dimension(&mut self) -> Result<usize> {
        let tok = self.token()?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::InvalidInput(format!("bad dimension {tok:?}"))),
        }
    }

    /// Consume the single whitespace byte that separates header and raster.
    fn raster(mut self) -> Result<&'a [u8]> {
        match self.data.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(&self.data[self.pos..])
            }
            _ => Err(Error::InvalidInput("missing raster separator".into())),
        }
    }
}

pub fn decode_pfm(data: &[u8]) -> Result<FloatGrid> {
    let mut h = Header::new(data);
    let magic = h.token()?;
    if magic != "Pf" {
        return Err(Error::InvalidInput(format!(
            "bad magic {magic:?}, expected grayscale PFM \"Pf\""
        )));
    }
    let width = h.dimension()?;
    let height = h.dimension()?;
    let scale_tok = h.token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::InvalidInput(format!("bad PFM scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::InvalidInput("PFM scale must be non-zero".into()));
    }
    let little_endian = scale < 0.0;
    let raster = h.raster()?;
    let expected = width * height * 4;
    if raster.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "PFM {width}x{height} needs {expected} bytes, found {}",
            raster.len()
        )));
    }
    let mut values = vec![0f32; width * height];
    for (file_row, chunk) in raster.chunks_exact(width * 4).enumerate() {
        let row = height - 1 - file_row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            values[row * width + x] = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
        }
    }
    FloatGrid::new(width, height, values)
}

pub fn encode_pfm(grid: &FloatGrid) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", grid.width, grid.height).into_bytes();
    out.reserve(grid.values.len() * 4);
    for row in grid.values.chunks_exact(grid.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pgm_mask(data: &[u8]) -> Result<BinaryMask> {
    let mut h = Header::new(data);
    let magic = h.token()?;
    if magic != "P5" {
        return Err(Error::InvalidInput(format!(
            "bad magic {magic:?}, expected binary PGM \"P5\""
        )));
    }
    let width = h.dimension()?;
    let height = h.dimension()?;
    let maxval = h.dimension()?;
    if maxval > 255 {
        return Err(Error::InvalidInput(format!(
            "16-bit PGM (maxval {maxval}) not supported for masks"
        )));
    }
    let raster = h.raster()?;
    if raster.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "PGM {width}x{height} needs {} bytes, found {}",
            width * height,
            raster.len()
        )));
    }
    let threshold = (maxval + 1) / 2;
    let bits = raster.iter().map(|&v| usize::from(v) >= threshold).collect();
    BinaryMask::new(width, height, bits)
}

pub fn encode_pgm_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
        Error::DimensionMismatch(m) => {
            Error::DimensionMismatch(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

pub fn load_float_grid(path: &Path) -> Result<FloatGrid> {
    with_path(path, decode_pfm(&read(path)?))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    with_path(path, decode_pgm_mask(&read(path)?))
}

pub fn save_float_grid(path: &Path, grid: &FloatGrid) -> Result<()> {
    std::fs::write(path, encode_pfm(grid)).map_err(|e| Error::io(path, e))
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    std::fs::write(path, encode_pgm_mask(mask)).map_err(|e| Error::io(path, e))
}
