//! Fingerprint-guided reconstruction of corrupted images and its losses.
//!
//! Each corrupted shard is encoded, the closest anchored latent for its cell
//! is retrieved, and a generator blends the corrupted pixels with a raster
//! decoded from that latent. The reference generator is a plain latent
//! blend; anything implementing [`ShardGenerator`] can replace it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{
    block_means, cosine, hash_latent, BlockEncoder, FingerprintError, LatentVector, ShardEncoder,
};
use crate::hash::Digest;
use crate::imaging::{fragment, psnr, reaggregate, ssim, Image, ImagingError, Shard, ShardGrid};
use crate::ledger::{
    retrieve_latent, Archive, Fallback, Ledger, LedgerError, RetrievalMode, Scope,
};

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructionError {
    #[error("blend alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("loss weights must be finite and non-negative")]
    InvalidWeights,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Perceptual weight.
    pub lambda1: f64,
    /// Semantic weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ReconstructionError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) {
            Ok(())
        } else {
            Err(ReconstructionError::InvalidWeights)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses {
    pub pixel: f64,
    pub perceptual: f64,
    pub semantic: f64,
    pub total: f64,
}

/// Decodes a block latent to a `width × height` raster: block value
/// `z·scale + mean`, nearest-neighbour upsampled and clamped.
pub fn decode_latent(
    z: &LatentVector,
    width: usize,
    height: usize,
    mean: f64,
    scale: f64,
) -> Result<Vec<f64>, FingerprintError> {
    let side = perfect_root(z.dim())?;
    if !width.is_multiple_of(side) || !height.is_multiple_of(side) {
        return Err(FingerprintError::InvalidDim(format!(
            "{side}x{side} block grid does not divide {width}x{height}"
        )));
    }
    let (bw, bh) = (width / side, height / side);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = z.values[(y / bh) * side + x / bw] as f64 * scale + mean;
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

fn perfect_root(dim: usize) -> Result<usize, FingerprintError> {
    let side = (dim as f64).sqrt().round() as usize;
    if side == 0 || side * side != dim {
        return Err(FingerprintError::InvalidDim(format!(
            "latent dim {dim} is not a perfect square"
        )));
    }
    Ok(side)
}

/// `(1 − alpha)·a + alpha·b`, clamped.
pub fn blend_pixels(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((1.0 - alpha) * x + alpha * y).clamp(0.0, 1.0))
        .collect()
}

/// Synthesizes a shard from its corrupted pixels and latents.
pub trait ShardGenerator {
    fn generate(
        &self,
        corrupted: &Shard,
        s_k: &LatentVector,
        z_star: &LatentVector,
    ) -> Result<Shard, ReconstructionError>;
}

/// Reference generator: blends the corrupted shard with the decoded prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentBlend {
    pub alpha: f64,
}

impl ShardGenerator for LatentBlend {
    fn generate(
        &self,
        corrupted: &Shard,
        s_k: &LatentVector,
        z_star: &LatentVector,
    ) -> Result<Shard, ReconstructionError> {
        generate_shard(corrupted, s_k, z_star, self.alpha)
    }
}

/// The decoded prior keeps the corrupted shard's mean level and takes its
/// contrast from the projection of the corrupted block pattern onto `z_star`.
pub fn generate_shard(
    corrupted: &Shard,
    s_k: &LatentVector,
    z_star: &LatentVector,
    alpha: f64,
) -> Result<Shard, ReconstructionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ReconstructionError::InvalidAlpha(alpha));
    }
    if s_k.dim() != z_star.dim() {
        return Err(FingerprintError::DimensionMismatch(s_k.dim(), z_star.dim()).into());
    }
    let side = perfect_root(z_star.dim())?;
    let means = block_means(corrupted.width, corrupted.height, &corrupted.pixels, side)?;
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    let scale = means
        .iter()
        .zip(&z_star.values)
        .map(|(m, z)| (m - avg) * *z as f64)
        .sum::<f64>()
        .max(0.0);
    let prior = decode_latent(
        z_star,
        corrupted.width,
        corrupted.height,
        corrupted.mean(),
        scale,
    )?;
    Ok(Shard {
        pixels: blend_pixels(&corrupted.pixels, &prior, alpha),
        ..corrupted.clone()
    })
}

/// Mean over shards of the latent cosine. Two zero latents count as a
/// match, exactly one zero latent as orthogonal.
pub fn image_cosine(
    a: &Image,
    b: &Image,
    grid: ShardGrid,
    encoder: &BlockEncoder,
) -> Result<f64, ReconstructionError> {
    a.same_dims(b)?;
    let (sa, sb) = (fragment(a, grid)?, fragment(b, grid)?);
    let mut total = 0.0;
    for (x, y) in sa.iter().zip(&sb) {
        let (za, zb) = (encoder.encode(x)?, encoder.encode(y)?);
        total += match (za.is_zero(), zb.is_zero()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => cosine(&za, &zb)?,
        };
    }
    Ok(total / sa.len() as f64)
}

const PYRAMID_LEVELS: usize = 3;

fn gradient_magnitude(w: usize, h: usize, p: &[f64]) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        p[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0;
            let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

fn downsample(w: usize, h: usize, p: &[f64]) -> (usize, usize, Vec<f64>) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let i = 2 * y * w + 2 * x;
            out.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) / 4.0);
        }
    }
    (nw, nh, out)
}

/// Mean absolute difference of gradient-magnitude maps, averaged over a
/// three-level 2×2 mean pyramid. Levels that would be empty are skipped.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64, ImagingError> {
    a.same_dims(b)?;
    let (mut w, mut h) = (a.width(), a.height());
    let (mut pa, mut pb) = (a.pixels().to_vec(), b.pixels().to_vec());
    let mut sum = 0.0;
    let mut levels = 0;
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            if w < 2 || h < 2 {
                break;
            }
            let (nw, nh, da) = downsample(w, h, &pa);
            pb = downsample(w, h, &pb).2;
            (w, h, pa) = (nw, nh, da);
        }
        let (ga, gb) = (gradient_magnitude(w, h, &pa), gradient_magnitude(w, h, &pb));
        sum += ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ga.len() as f64;
        levels += 1;
    }
    Ok(sum / levels as f64)
}

/// Pixel MAE, perceptual proxy and semantic distance, combined with `weights`.
pub fn compute_losses(
    reconstructed: &Image,
    original: &Image,
    grid: ShardGrid,
    encoder: &BlockEncoder,
    weights: LossWeights,
) -> Result<Losses, ReconstructionError> {
    weights.validate()?;
    reconstructed.same_dims(original)?;
    let n = original.pixels().len() as f64;
    let pixel = reconstructed
        .pixels()
        .iter()
        .zip(original.pixels())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let perceptual = perceptual_distance(reconstructed, original)?;
    let semantic = (1.0 - image_cosine(reconstructed, original, grid, encoder)?).max(0.0);
    Ok(Losses {
        pixel,
        perceptual,
        semantic,
        total: pixel + weights.lambda1 * perceptual + weights.lambda2 * semantic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub grid: ShardGrid,
    pub encoder: BlockEncoder,
    pub alpha: f64,
    pub fallback: Fallback,
    pub weights: LossWeights,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            grid: ShardGrid::default(),
            encoder: BlockEncoder::default(),
            alpha: 0.6,
            fallback: Fallback::Nearest,
            weights: LossWeights::default(),
        }
    }
}

/// Where one shard's latent came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShardProvenance {
    pub cell: (usize, usize),
    pub scope: Scope,
    pub height: u64,
    pub tx_id: Digest,
    pub mode: RetrievalMode,
    pub cosine: f64,
    /// Image the anchored latent belongs to.
    pub source_image: String,
    pub verified: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QualityMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub cosine: f64,
    pub losses: Losses,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub image: Image,
    pub provenance: Vec<ShardProvenance>,
    /// Against the ground truth, when one was supplied.
    pub metrics: Option<QualityMetrics>,
    /// Every retrieved latent re-verified through its Merkle path on intact chains.
    pub verified: bool,
}

/// Scores `candidate` against `original`.
pub fn quality(
    candidate: &Image,
    original: &Image,
    config: &ReconstructionConfig,
) -> Result<QualityMetrics, ReconstructionError> {
    Ok(QualityMetrics {
        psnr: psnr(candidate, original)?,
        ssim: ssim(candidate, original)?,
        cosine: image_cosine(candidate, original, config.grid, &config.encoder)?,
        losses: compute_losses(
            candidate,
            original,
            config.grid,
            &config.encoder,
            config.weights,
        )?,
    })
}

/// Reconstructs with the reference [`LatentBlend`] generator.
pub fn reconstruct_image(
    corrupted: &Image,
    archive: &Archive,
    config: &ReconstructionConfig,
    original: Option<&Image>,
) -> Result<ReconstructionResult, ReconstructionError> {
    reconstruct_with(
        corrupted,
        archive,
        config,
        &LatentBlend {
            alpha: config.alpha,
        },
        original,
    )
}

pub fn reconstruct_with(
    corrupted: &Image,
    archive: &Archive,
    config: &ReconstructionConfig,
    generator: &dyn ShardGenerator,
    original: Option<&Image>,
) -> Result<ReconstructionResult, ReconstructionError> {
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(ReconstructionError::InvalidAlpha(config.alpha));
    }
    config.weights.validate()?;
    let shards = fragment(corrupted, config.grid)?;
    let broken = archive.broken_scopes();
    let mut out = Vec::with_capacity(shards.len());
    let mut provenance = Vec::with_capacity(shards.len());
    for shard in &shards {
        let scope = Scope::Cell {
            row: shard.row,
            col: shard.col,
        };
        let s_k = config.encoder.encode(shard)?;
        let empty = Ledger::new(scope.clone());
        let ledger = archive.ledger(&scope).unwrap_or(&empty);
        let hit = retrieve_latent(ledger, archive.store(), &s_k, config.fallback)?;
        let tx = ledger
            .tx_at(hit.provenance.location)
            .expect("retrieval returns a live location");
        let source_image = tx.meta().get("image_id").unwrap_or_default().to_string();
        let verified = !broken.contains(&scope)
            && !broken.contains(&Scope::Global)
            && hash_latent(&hit.latent) == tx.payload_hash()
            && archive.verify_shard(&source_image, shard.row, shard.col, &tx.payload_hash());
        out.push(generator.generate(shard, &s_k, &hit.latent)?);
        provenance.push(ShardProvenance {
            cell: (shard.row, shard.col),
            scope,
            height: hit.provenance.location.height,
            tx_id: hit.provenance.tx_id,
            mode: hit.mode,
            cosine: hit.cosine,
            source_image,
            verified,
        });
    }
    let image = reaggregate(&out, config.grid)?;
    let metrics = original.map(|o| quality(&image, o, config)).transpose()?;
    let verified = provenance.iter().all(|p| p.verified);
    Ok(ReconstructionResult {
        image,
        provenance,
        metrics,
        verified,
    })
}
