//! Image grids written as binary PGM.

use infogan_dp::data::unit_to_pixel;
use infogan_dp::Tensor;

use crate::error::CliError;

pub const GUTTER: usize = 2;
const GUTTER_VALUE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Grid {
    /// Tiles `[rows·cols, 1, h, w]` images row-major, values in `[-1, 1]` (clamped).
    pub fn tile(images: &Tensor, rows: usize, cols: usize) -> Result<Self, CliError> {
        let &[n, 1, h, w] = images.shape() else {
            return Err(CliError::Runtime(format!("cannot tile images of shape {:?}", images.shape())));
        };
        if n != rows * cols {
            return Err(CliError::Runtime(format!("{n} images do not fill a {rows}×{cols} grid")));
        }
        let width = cols * w + (cols - 1) * GUTTER;
        let height = rows * h + (rows - 1) * GUTTER;
        let mut pixels = vec![GUTTER_VALUE; width * height];
        for (i, img) in images.data().chunks(h * w).enumerate() {
            let (top, left) = ((i / cols) * (h + GUTTER), (i % cols) * (w + GUTTER));
            for y in 0..h {
                for x in 0..w {
                    let v = img[y * w + x];
                    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
                    pixels[(top + y) * width + left + x] = unit_to_pixel(v).expect("clamped");
                }
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse_pgm(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Runtime(format!("not a binary PGM: {m}"));
        let mut fields = Vec::new();
        let mut at = 0;
        while fields.len() < 4 {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err(bad("header ends early"));
            }
            fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header"))?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = &bytes[(at + 1).min(bytes.len())..];
        if body.len() != width * height {
            return Err(bad("pixel count"));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }

    pub fn tile_pixels(&self, row: usize, col: usize, h: usize, w: usize) -> Vec<u8> {
        let (top, left) = (row * (h + GUTTER), col * (w + GUTTER));
        (0..h)
            .flat_map(|y| self.pixels[(top + y) * self.width + left..][..w].to_vec())
            .collect()
    }
}
