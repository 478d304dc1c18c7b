use serde::{Deserialize, Serialize};

use super::FingerprintError;
use crate::hash::Digest;
use crate::imaging::Shard;

/// Which view of a shard a latent summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    /// Block statistics at full resolution.
    #[default]
    Full,
    /// Block statistics after 2x downsampling.
    Semantic,
}

impl LatentKind {
    pub fn tag(self) -> u8 {
        match self {
            LatentKind::Full => 0,
            LatentKind::Semantic => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<LatentKind> {
        match tag {
            0 => Some(LatentKind::Full),
            1 => Some(LatentKind::Semantic),
            _ => None,
        }
    }
}

/// Shard embedding: unit-norm or all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub kind: LatentKind,
    pub values: Vec<f32>,
}

/// Cryptographic identity of a latent.
pub type Fingerprint = Digest;

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `dim u32 LE ‖ kind u8 ‖ dim × f32 LE`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.values.len());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        out.push(self.kind.tag());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<LatentVector, FingerprintError> {
        if bytes.len() < 5 {
            return Err(FingerprintError::Malformed(
                "latent shorter than header".into(),
            ));
        }
        let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let kind = LatentKind::from_tag(bytes[4])
            .ok_or_else(|| FingerprintError::Malformed(format!("unknown kind tag {}", bytes[4])))?;
        let body = &bytes[5..];
        if body.len() != dim * 4 {
            return Err(FingerprintError::Malformed(format!(
                "latent of dim {dim} needs {} bytes, found {}",
                dim * 4,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(LatentVector { kind, values })
    }
}

/// SHA-256 over the canonical serialization.
pub fn hash_latent(z: &LatentVector) -> Fingerprint {
    Digest::of(&z.canonical_bytes())
}

/// Cosine similarity; 0 when either vector is all-zero.
pub fn cosine(a: &LatentVector, b: &LatentVector) -> Result<f64, FingerprintError> {
    if a.dim() != b.dim() {
        return Err(FingerprintError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Encoder interface; a learned encoder can replace [`BlockEncoder`].
pub trait ShardEncoder {
    fn encode(&self, shard: &Shard) -> Result<LatentVector, FingerprintError>;
}

/// Block-statistics reference encoder.
///
/// The shard is cut into `√dim × √dim` equal blocks; the latent is the
/// vector of block means minus their average, scaled to unit length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEncoder {
    pub dim: usize,
    pub kind: LatentKind,
}

impl Default for BlockEncoder {
    fn default() -> Self {
        BlockEncoder {
            dim: 64,
            kind: LatentKind::Full,
        }
    }
}

impl BlockEncoder {
    pub fn new(dim: usize, kind: LatentKind) -> BlockEncoder {
        BlockEncoder { dim, kind }
    }

    /// Side length of the block grid, if `dim` is a nonzero perfect square.
    pub fn side(&self) -> Result<usize, FingerprintError> {
        let side = (self.dim as f64).sqrt().round() as usize;
        if side == 0 || side * side != self.dim {
            return Err(FingerprintError::InvalidDim(format!(
                "{} is not a perfect square",
                self.dim
            )));
        }
        Ok(side)
    }

    /// Unnormalized, mean-subtracted block means (the deviation vector).
    pub fn block_deviations(&self, shard: &Shard) -> Result<Vec<f64>, FingerprintError> {
        let means = self.block_means(shard)?;
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        Ok(means.into_iter().map(|m| m - avg).collect())
    }

    fn block_means(&self, shard: &Shard) -> Result<Vec<f64>, FingerprintError> {
        let side = self.side()?;
        let (w, h, pixels) = match self.kind {
            LatentKind::Full => (shard.width, shard.height, shard.pixels.clone()),
            LatentKind::Semantic => {
                if !shard.width.is_multiple_of(2) || !shard.height.is_multiple_of(2) {
                    return Err(FingerprintError::InvalidDim(format!(
                        "semantic encoding needs even shard dims, got {}x{}",
                        shard.width, shard.height
                    )));
                }
                let (w, h) = (shard.width / 2, shard.height / 2);
                let mut down = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        let at = |dx: usize, dy: usize| {
                            shard.pixels[(2 * y + dy) * shard.width + 2 * x + dx]
                        };
                        down.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
                    }
                }
                (w, h, down)
            }
        };
        block_means(w, h, &pixels, side)
    }
}

pub(crate) fn block_means(
    w: usize,
    h: usize,
    pixels: &[f64],
    side: usize,
) -> Result<Vec<f64>, FingerprintError> {
    if !w.is_multiple_of(side) || !h.is_multiple_of(side) {
        return Err(FingerprintError::InvalidDim(format!(
            "{side}x{side} block grid does not divide {w}x{h}"
        )));
    }
    let (bw, bh) = (w / side, h / side);
    let count = (bw * bh) as f64;
    let mut means = vec![0.0; side * side];
    for (i, mean) in means.iter_mut().enumerate() {
        let (by, bx) = (i / side, i % side);
        let mut sum = 0.0;
        for y in by * bh..(by + 1) * bh {
            sum += pixels[y * w + bx * bw..y * w + (bx + 1) * bw]
                .iter()
                .sum::<f64>();
        }
        *mean = sum / count;
    }
    Ok(means)
}

/// Deviations below this norm are treated as a constant shard.
const ZERO_VARIANCE: f64 = 1e-12;

pub(crate) fn normalize(kind: LatentKind, deviations: &[f64]) -> LatentVector {
    let norm = deviations.iter().map(|d| d * d).sum::<f64>().sqrt();
    let values = if norm < ZERO_VARIANCE {
        vec![0.0; deviations.len()]
    } else {
        deviations.iter().map(|d| (d / norm) as f32).collect()
    };
    LatentVector { kind, values }
}

impl ShardEncoder for BlockEncoder {
    fn encode(&self, shard: &Shard) -> Result<LatentVector, FingerprintError> {
        Ok(normalize(self.kind, &self.block_deviations(shard)?))
    }
}

/// Encodes with the reference encoder.
pub fn encode_shard(
    shard: &Shard,
    dim: usize,
    kind: LatentKind,
) -> Result<LatentVector, FingerprintError> {
    BlockEncoder::new(dim, kind).encode(shard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{fragment, Image, ShardGrid};
    use proptest::prelude::*;

    fn shard_from(w: usize, h: usize, pixels: Vec<f64>) -> Shard {
        let img = Image::new(w, h, pixels).unwrap();
        fragment(&img, ShardGrid::new(1, 1).unwrap())
            .unwrap()
            .remove(0)
    }

    #[test]
    fn constant_shard_encodes_to_zero() {
        let shard = shard_from(64, 64, vec![0.3; 4096]);
        let z = encode_shard(&shard, 64, LatentKind::Full).unwrap();
        assert!(z.is_zero());
        assert_eq!(z.dim(), 64);
    }

    #[test]
    fn half_split_gives_signed_eighths() {
        // 8x8 blocks over a 64x64 shard: left four block columns mean 0,
        // right four mean 1; deviations ±0.5, norm 4, so entries ±0.125.
        let px: Vec<f64> = (0..64 * 64)
            .map(|i| if i % 64 < 32 { 0.0 } else { 1.0 })
            .collect();
        let shard = shard_from(64, 64, px);
        for kind in [LatentKind::Full, LatentKind::Semantic] {
            let z = encode_shard(&shard, 64, kind).unwrap();
            for (i, v) in z.values.iter().enumerate() {
                let expected = if i % 8 < 4 { -0.125 } else { 0.125 };
                assert_eq!(*v, expected, "kind {kind:?} entry {i}");
            }
            assert!((z.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let px: Vec<f64> = (0..1024).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let shard = shard_from(32, 32, px);
        let a = encode_shard(&shard, 16, LatentKind::Full).unwrap();
        let b = encode_shard(&shard, 16, LatentKind::Full).unwrap();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn invalid_dims_rejected() {
        let shard = shard_from(30, 30, vec![0.5; 900]);
        assert!(matches!(
            encode_shard(&shard, 60, LatentKind::Full),
            Err(FingerprintError::InvalidDim(_))
        ));
        assert!(matches!(
            encode_shard(&shard, 16, LatentKind::Full),
            Err(FingerprintError::InvalidDim(_))
        ));
        assert!(encode_shard(&shard, 25, LatentKind::Full).is_ok());
        // 15x15 after downsampling is not divisible by 2
        assert!(matches!(
            encode_shard(&shard, 4, LatentKind::Semantic),
            Err(FingerprintError::InvalidDim(_))
        ));
    }

    #[test]
    fn zero_latent_digest_matches_independent_sha256() {
        let z = LatentVector {
            kind: LatentKind::Full,
            values: vec![0.0; 64],
        };
        let bytes = z.canonical_bytes();
        assert_eq!(bytes.len(), 261);
        // Frozen from `python3 -c "import hashlib;print(hashlib.sha256(bytes([64,0,0,0,0])+bytes(256)).hexdigest())"`
        assert_eq!(
            hash_latent(&z).to_hex(),
            "4222383633ffeebe3511a7564b66d20fe6d93eb0668f4ce5309c2c11bac259b0"
        );
    }

    #[test]
    fn sign_flip_changes_fingerprint() {
        let mut z = LatentVector {
            kind: LatentKind::Full,
            values: vec![0.5, -0.5, 0.5, -0.5],
        };
        let before = hash_latent(&z);
        z.values[2] = -z.values[2];
        assert_ne!(before, hash_latent(&z));
    }

    #[test]
    fn cosine_basics() {
        let v = |values: Vec<f32>| LatentVector {
            kind: LatentKind::Full,
            values,
        };
        let a = v(vec![0.6, 0.8, 0.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(vec![1.0, 0.0]), &v(vec![0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&a, &v(vec![1.2, 1.6, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&a, &v(vec![0.0; 3])).unwrap(), 0.0);
        assert!(matches!(
            cosine(&a, &v(vec![1.0])),
            Err(FingerprintError::DimensionMismatch(3, 1))
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(a in proptest::collection::vec(-10.0f32..10.0, 16),
                             b in proptest::collection::vec(-10.0f32..10.0, 16)) {
            let a = LatentVector { kind: LatentKind::Full, values: a };
            let b = LatentVector { kind: LatentKind::Full, values: b };
            prop_assert!(cosine(&a, &b).unwrap().abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn canonical_bytes_round_trip(values in proptest::collection::vec(-1.0f32..1.0, 0..40), semantic in any::<bool>()) {
            let kind = if semantic { LatentKind::Semantic } else { LatentKind::Full };
            let z = LatentVector { kind, values };
            prop_assert_eq!(LatentVector::from_canonical_bytes(&z.canonical_bytes()).unwrap(), z);
        }

        #[test]
        fn encoded_latents_are_unit_or_zero(px in proptest::collection::vec(0.0f64..=1.0, 256)) {
            let z = encode_shard(&shard_from(16, 16, px), 16, LatentKind::Full).unwrap();
            prop_assert!(z.is_zero() || (z.norm() - 1.0).abs() < 1e-6);
        }
    }
}
