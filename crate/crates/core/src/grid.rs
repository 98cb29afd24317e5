//! Pixel grid with a circular aperture, and the height maps observed on it.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Pixel grid carrying a circular observation aperture.
///
/// `center_px` is `(x, y)` in pixel coordinates where `x` runs along columns
/// and `y` along rows. Physical coordinates are micrometers with `y` pointing
/// up, so row index increases downward while `y` decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub center_px: (f64, f64),
    pub diameter_px: f64,
    pub pixel_pitch_um: f64,
}

impl ApertureGrid {
    pub fn new(
        width_px: usize,
        height_px: usize,
        center_px: (f64, f64),
        diameter_px: f64,
        pixel_pitch_um: f64,
    ) -> Result<Self> {
        let grid = ApertureGrid {
            width_px,
            height_px,
            center_px,
            diameter_px,
            pixel_pitch_um,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with the aperture centered on the pixel array.
    pub fn centered(width_px: usize, height_px: usize, diameter_px: f64, pixel_pitch_um: f64) -> Result<Self> {
        Self::new(
            width_px,
            height_px,
            ((width_px as f64 - 1.0) / 2.0, (height_px as f64 - 1.0) / 2.0),
            diameter_px,
            pixel_pitch_um,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config {
                path: "grid".into(),
                message: "width_px and height_px must be positive".into(),
            });
        }
        if !self.diameter_px.is_finite()
            || self.diameter_px <= 0.0
            || !self.pixel_pitch_um.is_finite()
            || self.pixel_pitch_um <= 0.0
        {
            return Err(Error::Config {
                path: "grid".into(),
                message: "diameter_px and pixel_pitch_um must be positive".into(),
            });
        }
        if self.diameter_px > self.width_px.min(self.height_px) as f64 {
            return Err(Error::Config {
                path: "grid.diameter_px".into(),
                message: format!(
                    "diameter {} exceeds min(width, height) = {}",
                    self.diameter_px,
                    self.width_px.min(self.height_px)
                ),
            });
        }
        if self.aperture_pixel_count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width_px * self.height_px
    }

    /// Distance of pixel (row, col) from the aperture center, in pixels.
    pub fn radius_px(&self, row: usize, col: usize) -> f64 {
        let dx = col as f64 - self.center_px.0;
        let dy = row as f64 - self.center_px.1;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn in_aperture(&self, row: usize, col: usize) -> bool {
        self.radius_px(row, col) <= self.diameter_px / 2.0
    }

    /// Row-major aperture mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_pixels()];
        for row in 0..self.height_px {
            for col in 0..self.width_px {
                mask[row * self.width_px + col] = self.in_aperture(row, col);
            }
        }
        mask
    }

    pub fn aperture_pixel_count(&self) -> usize {
        let mut count = 0;
        for row in 0..self.height_px {
            for col in 0..self.width_px {
                if self.in_aperture(row, col) {
                    count += 1;
                }
            }
        }
        count
    }

    /// Physical coordinates (x, y) of a pixel center in micrometers,
    /// relative to the aperture center.
    pub fn pixel_position_um(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 - self.center_px.0) * self.pixel_pitch_um;
        let y = -(row as f64 - self.center_px.1) * self.pixel_pitch_um;
        (x, y)
    }
}

/// Dense height field in micrometers on a pixel grid, with the aperture mask.
/// Heights outside the mask are carried along but ignored by every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMap {
    width: usize,
    height: usize,
    pub heights_um: Vec<f64>,
    pub mask: Vec<bool>,
}

const SURFACE_MAGIC: &[u8; 4] = b"DMSF";
const SURFACE_VERSION: u32 = 1;

impl SurfaceMap {
    pub fn zeros(grid: &ApertureGrid) -> Self {
        SurfaceMap {
            width: grid.width_px,
            height: grid.height_px,
            heights_um: vec![0.0; grid.n_pixels()],
            mask: grid.mask(),
        }
    }

    pub fn from_heights(grid: &ApertureGrid, heights_um: Vec<f64>) -> Result<Self> {
        if heights_um.len() != grid.n_pixels() {
            return Err(Error::Dimension {
                context: "SurfaceMap::from_heights".into(),
                expected: grid.n_pixels(),
                got: heights_um.len(),
            });
        }
        Ok(SurfaceMap {
            width: grid.width_px,
            height: grid.height_px,
            heights_um,
            mask: grid.mask(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Max minus min height over the aperture.
    pub fn peak_to_valley(&self) -> Result<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (h, &inside) in self.heights_um.iter().zip(&self.mask) {
            if inside {
                lo = lo.min(*h);
                hi = hi.max(*h);
            }
        }
        if lo.is_infinite() {
            return Err(Error::EmptyMask);
        }
        Ok(hi - lo)
    }

    /// Plain-text export: row-major, one row per line, whitespace-separated.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if col > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{}", self.heights_um[self.idx(row, col)]));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path, grid: &ApertureGrid) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut heights = Vec::with_capacity(grid.n_pixels());
        let mut rows = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            let mut cols = 0usize;
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    message: format!("bad float `{tok}`"),
                })?;
                heights.push(v);
                cols += 1;
            }
            if cols != grid.width_px {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    message: format!("expected {} columns, got {cols}", grid.width_px),
                });
            }
        }
        if rows != grid.height_px {
            return Err(Error::Parse {
                path: path.into(),
                line: 0,
                message: format!("expected {} rows, got {rows}", grid.height_px),
            });
        }
        Self::from_heights(grid, heights)
    }

    /// Binary export. Little-endian layout: magic `DMSF`, u32 version,
    /// u32 width, u32 height, then width*height f64 heights row-major.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.heights_um.len() * 8);
        buf.extend_from_slice(SURFACE_MAGIC);
        buf.extend_from_slice(&SURFACE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for h in &self.heights_um {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path, grid: &ApertureGrid) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; 16];
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        if &header[0..4] != SURFACE_MAGIC {
            return Err(Error::Parse {
                path: path.into(),
                line: 0,
                message: "bad magic".into(),
            });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != SURFACE_VERSION {
            return Err(Error::Parse {
                path: path.into(),
                line: 0,
                message: format!("unsupported version {version}"),
            });
        }
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if width != grid.width_px || height != grid.height_px {
            return Err(Error::Dimension {
                context: format!("surface file {}", path.display()),
                expected: grid.n_pixels(),
                got: width * height,
            });
        }
        let mut data = Vec::new();
        file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
        if data.len() != width * height * 8 {
            return Err(Error::Parse {
                path: path.into(),
                line: 0,
                message: format!("expected {} payload bytes, got {}", width * height * 8, data.len()),
            });
        }
        let heights = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_heights(grid, heights)
    }
}

/// Atomic file write: write to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
