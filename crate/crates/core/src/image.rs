//! Grayscale line images and binary PGM (P5) I/O.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Grayscale image, values in [0,1], ink = 1.0 on a 0.0 background.
#[derive(Debug, Clone, PartialEq)]
pub struct LineImage {
    pub pixels: Array2<f64>,
}

impl LineImage {
    pub fn new(pixels: Array2<f64>) -> Self {
        LineImage { pixels }
    }

    pub fn blank(height: usize, width: usize) -> Self {
        LineImage::new(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// 8-bit P5 encoding with maxval 255; each pixel is `round(255 * v)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        // header: magic, width, height, maxval separated by whitespace; `#` starts a comment
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
                return Err(Error::parse(origin, 1, "truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::parse(origin, 1, format!("expected P5 magic, found {:?}", fields[0])));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(origin, 1, format!("bad PGM {what} {s:?}")))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        let maxval = num(&fields[3], "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::parse(origin, 1, format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(Error::parse(
                origin,
                1,
                format!("raster has {} bytes, expected {}", raster.len(), width * height),
            ));
        }
        let pixels = Array2::from_shape_fn((height, width), |(r, c)| raster[r * width + c] as f64 / maxval as f64);
        Ok(LineImage::new(pixels))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes, &path.display().to_string())
    }
}
