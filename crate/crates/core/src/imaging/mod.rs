//! Grayscale rasters, grid fragmentation and corruption.
//!
//! Pixels are `f64` intensities in `[0, 1]`, stored row-major. An image's
//! identity is the SHA-256 of its canonical raster bytes
//! (`width u32 LE ‖ height u32 LE ‖ pixels as f64 LE`), so any change to a
//! pixel changes the id.

pub mod format;
pub mod metrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::hash::Digest;

pub use metrics::{psnr, ssim, PSNR_CAP_DB};

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image {width}x{height} is smaller than the 8x8 SSIM window")]
    ImageTooSmall { width: usize, height: usize },
    #[error("missing shard for cell ({row},{col})")]
    MissingShard { row: usize, col: usize },
    #[error("inconsistent shard: {0}")]
    InconsistentShard(String),
    #[error("pixel {index} = {value} outside [0,1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("malformed image data: {0}")]
    Format(String),
}

/// Row-major grayscale raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    id: Digest,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Image, ImagingError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImagingError::DimensionMismatch(format!(
                "{}x{} raster needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImagingError::PixelOutOfRange { index, value });
        }
        let id = raster_id(width, height, &pixels);
        Ok(Image {
            width,
            height,
            pixels,
            id,
        })
    }

    /// Builds an image from arbitrary values, clamping each into `[0,1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(
        width: usize,
        height: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Image, ImagingError> {
        for p in pixels.iter_mut() {
            *p = if p.is_finite() {
                p.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Image::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Image, ImagingError> {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn id(&self) -> Digest {
        self.id
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub(crate) fn same_dims(&self, other: &Image) -> Result<(), ImagingError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImagingError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Content hash of a raster.
pub fn raster_id(width: usize, height: usize, pixels: &[f64]) -> Digest {
    let mut bytes = Vec::with_capacity(8 + pixels.len() * 8);
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    for p in pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    Digest::of(&bytes)
}

/// Rectangular partition of an image into `rows x cols` equal cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ShardGrid {
    pub rows: usize,
    pub cols: usize,
}

impl ShardGrid {
    pub fn new(rows: usize, cols: usize) -> Result<ShardGrid, ImagingError> {
        if rows == 0 || cols == 0 {
            return Err(ImagingError::DimensionMismatch(
                "grid needs at least one row and one column".into(),
            ));
        }
        Ok(ShardGrid { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major list of `(row, col)` cells.
    pub fn cell_iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (r, c)))
    }

    /// Shard dimensions `(width, height)` for an image, or an error when the
    /// grid does not divide the image exactly.
    pub fn shard_dims(&self, width: usize, height: usize) -> Result<(usize, usize), ImagingError> {
        if self.rows == 0
            || self.cols == 0
            || !width.is_multiple_of(self.cols)
            || !height.is_multiple_of(self.rows)
        {
            return Err(ImagingError::DimensionMismatch(format!(
                "grid {}x{} does not divide image {}x{}",
                self.rows, self.cols, width, height
            )));
        }
        Ok((width / self.cols, height / self.rows))
    }
}

impl Default for ShardGrid {
    fn default() -> Self {
        ShardGrid { rows: 4, cols: 4 }
    }
}

/// One grid cell of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub image_id: Digest,
    pub row: usize,
    pub col: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Shard {
    /// Deterministic shard identifier: `SHA-256(image_id ‖ row u32 LE ‖ col u32 LE)`.
    pub fn key(&self) -> Digest {
        shard_key(&self.image_id, self.row, self.col)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

pub fn shard_key(image_id: &Digest, row: usize, col: usize) -> Digest {
    Digest::of_parts(&[
        image_id.as_bytes(),
        &(row as u32).to_le_bytes(),
        &(col as u32).to_le_bytes(),
    ])
}

/// Splits an image into `grid.cells()` shards in row-major cell order.
pub fn fragment(image: &Image, grid: ShardGrid) -> Result<Vec<Shard>, ImagingError> {
    let (sw, sh) = grid.shard_dims(image.width, image.height)?;
    let shards = grid
        .cell_iter()
        .map(|(row, col)| {
            let mut pixels = Vec::with_capacity(sw * sh);
            for y in row * sh..(row + 1) * sh {
                let start = y * image.width + col * sw;
                pixels.extend_from_slice(&image.pixels[start..start + sw]);
            }
            Shard {
                image_id: image.id,
                row,
                col,
                width: sw,
                height: sh,
                pixels,
            }
        })
        .collect();
    Ok(shards)
}

/// Inverse of [`fragment`]. Shards may arrive in any order but every cell
/// must be present exactly once with matching dimensions and lineage.
pub fn reaggregate(shards: &[Shard], grid: ShardGrid) -> Result<Image, ImagingError> {
    let first = shards
        .first()
        .ok_or(ImagingError::MissingShard { row: 0, col: 0 })?;
    let (sw, sh) = (first.width, first.height);
    let lineage = first.image_id;
    let mut slots: Vec<Option<&Shard>> = vec![None; grid.cells()];
    for shard in shards {
        if shard.row >= grid.rows || shard.col >= grid.cols {
            return Err(ImagingError::InconsistentShard(format!(
                "cell ({},{}) outside {}x{} grid",
                shard.row, shard.col, grid.rows, grid.cols
            )));
        }
        if shard.width != sw || shard.height != sh || shard.pixels.len() != sw * sh {
            return Err(ImagingError::InconsistentShard(format!(
                "cell ({},{}) has dims {}x{}, expected {}x{}",
                shard.row, shard.col, shard.width, shard.height, sw, sh
            )));
        }
        if shard.image_id != lineage {
            return Err(ImagingError::InconsistentShard(format!(
                "cell ({},{}) belongs to a different image",
                shard.row, shard.col
            )));
        }
        let slot = &mut slots[shard.row * grid.cols + shard.col];
        if slot.is_some() {
            return Err(ImagingError::InconsistentShard(format!(
                "cell ({},{}) supplied twice",
                shard.row, shard.col
            )));
        }
        *slot = Some(shard);
    }
    let width = sw * grid.cols;
    let height = sh * grid.rows;
    let mut pixels = vec![0.0; width * height];
    for (idx, slot) in slots.iter().enumerate() {
        let (row, col) = (idx / grid.cols, idx % grid.cols);
        let shard = slot.ok_or(ImagingError::MissingShard { row, col })?;
        for y in 0..sh {
            let dst = (row * sh + y) * width + col * sw;
            pixels[dst..dst + sw].copy_from_slice(&shard.pixels[y * sw..(y + 1) * sw]);
        }
    }
    Image::new(width, height, pixels)
}

/// Adds i.i.d. zero-mean Gaussian noise and clamps to `[0,1]`.
pub fn corrupt_gaussian(image: &Image, sigma: f64, seed: u64) -> Image {
    if sigma <= 0.0 || !sigma.is_finite() {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    let pixels = image
        .pixels
        .iter()
        .map(|p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Image::new(image.width, image.height, pixels).expect("clamped pixels are in range")
}
