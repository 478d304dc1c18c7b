//! Rank keys, MAC signatures and degree-weighted quorum certificates.

use std::collections::BTreeMap;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use crate::hash::Digest;

type HmacSha256 = Hmac<Sha256>;

/// A rank's endorsement of a transaction id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature {
    pub signer: usize,
    pub bytes: [u8; 32],
}

/// Per-rank MAC secrets. The simulator holds every key, so any rank can
/// check any signature.
#[derive(Clone, Debug)]
pub struct Keyring {
    secrets: Vec<[u8; 32]>,
}

impl Keyring {
    pub fn new(ranks: usize, seed: u64) -> Keyring {
        let secrets = (0..ranks)
            .map(|r| {
                Digest::of_parts(&[
                    b"prosima-rank-key",
                    &seed.to_le_bytes(),
                    &(r as u64).to_le_bytes(),
                ])
                .0
            })
            .collect();
        Keyring { secrets }
    }

    pub fn ranks(&self) -> usize {
        self.secrets.len()
    }

    fn mac(&self, rank: usize, message: &[u8]) -> HmacSha256 {
        let mut mac =
            HmacSha256::new_from_slice(&self.secrets[rank]).expect("hmac accepts any key length");
        mac.update(message);
        mac
    }

    /// Honest signature: HMAC-SHA256 over the transaction id.
    pub fn sign(&self, rank: usize, tx_id: &Digest) -> Signature {
        Signature {
            signer: rank,
            bytes: self
                .mac(rank, tx_id.as_bytes())
                .finalize()
                .into_bytes()
                .into(),
        }
    }

    pub fn verify(&self, tx_id: &Digest, sig: &Signature) -> bool {
        sig.signer < self.secrets.len()
            && self
                .mac(sig.signer, tx_id.as_bytes())
                .verify_slice(&sig.bytes)
                .is_ok()
    }
}

/// Aggregated endorsements for one transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuorumCertificate {
    pub tx_id: Digest,
    /// Sorted by signer, one entry per signer.
    pub signatures: Vec<Signature>,
    pub weight_sum: u64,
}

impl QuorumCertificate {
    pub fn signers(&self) -> impl Iterator<Item = usize> + '_ {
        self.signatures.iter().map(|s| s.signer)
    }

    /// `tx_id ‖ weight_sum u64 ‖ count u32 ‖ (rank u32 ‖ sig)* ‖ sha256(preceding)`.
    ///
    /// The trailing digest makes every byte of a stored certificate
    /// tamper-evident even though the block merkle root only covers tx ids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(76 + 36 * self.signatures.len());
        out.extend_from_slice(self.tx_id.as_bytes());
        out.extend_from_slice(&self.weight_sum.to_le_bytes());
        out.extend_from_slice(&(self.signatures.len() as u32).to_le_bytes());
        for sig in &self.signatures {
            out.extend_from_slice(&(sig.signer as u32).to_le_bytes());
            out.extend_from_slice(&sig.bytes);
        }
        let check = Digest::of(&out);
        out.extend_from_slice(check.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<QuorumCertificate, String> {
        if bytes.len() < 76 {
            return Err("certificate too short".into());
        }
        let (body, check) = bytes.split_at(bytes.len() - 32);
        if Digest::of(body).as_bytes() != check {
            return Err("certificate checksum mismatch".into());
        }
        let tx_id = Digest(body[..32].try_into().unwrap());
        let weight_sum = u64::from_le_bytes(body[32..40].try_into().unwrap());
        let count = u32::from_le_bytes(body[40..44].try_into().unwrap()) as usize;
        let rest = &body[44..];
        if rest.len() != count * 36 {
            return Err(format!(
                "certificate declares {count} signatures but carries {} bytes",
                rest.len()
            ));
        }
        let signatures = rest
            .chunks_exact(36)
            .map(|c| Signature {
                signer: u32::from_le_bytes(c[..4].try_into().unwrap()) as usize,
                bytes: c[4..].try_into().unwrap(),
            })
            .collect();
        Ok(QuorumCertificate {
            tx_id,
            signatures,
            weight_sum,
        })
    }
}

/// Acceptance rule: at least `2f+1` distinct valid signers whose degrees
/// sum to at least `weight_threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuorumRule {
    pub faults: usize,
    /// Overlay degree of each rank.
    pub degrees: Vec<u64>,
    pub weight_threshold: u64,
}

impl QuorumRule {
    /// Builds the rule with the default threshold: the smaller of
    /// `(2f+1) · mean overlay degree` and the weight of the lightest possible
    /// honest set (the `P − f` smallest rank degrees). The second term keeps
    /// a full honest set able to certify.
    pub fn with_default_threshold(
        faults: usize,
        degrees: Vec<u64>,
        mean_overlay_degree: f64,
    ) -> QuorumRule {
        let mut sorted = degrees.clone();
        sorted.sort_unstable();
        let honest_floor: u64 = sorted
            .iter()
            .take(degrees.len().saturating_sub(faults))
            .sum();
        let nominal = ((2 * faults + 1) as f64 * mean_overlay_degree).ceil() as u64;
        QuorumRule {
            faults,
            degrees,
            weight_threshold: nominal.min(honest_floor),
        }
    }

    pub fn min_signers(&self) -> usize {
        2 * self.faults + 1
    }

    /// Keeps the first valid signature per signer and returns a certificate
    /// if the count and weight thresholds are both met.
    pub fn certify(
        &self,
        keyring: &Keyring,
        tx_id: &Digest,
        sigs: &[Signature],
    ) -> Option<QuorumCertificate> {
        let mut valid: BTreeMap<usize, Signature> = BTreeMap::new();
        for sig in sigs {
            if sig.signer < self.degrees.len()
                && !valid.contains_key(&sig.signer)
                && keyring.verify(tx_id, sig)
            {
                valid.insert(sig.signer, *sig);
            }
        }
        let weight_sum = valid.keys().map(|r| self.degrees[*r]).sum();
        let cert = QuorumCertificate {
            tx_id: *tx_id,
            signatures: valid.into_values().collect(),
            weight_sum,
        };
        self.accepts(keyring, &cert).then_some(cert)
    }

    /// Full check of a certificate: distinct sorted signers, valid MACs,
    /// recomputed weight, both thresholds.
    pub fn accepts(&self, keyring: &Keyring, cert: &QuorumCertificate) -> bool {
        let distinct = cert
            .signatures
            .windows(2)
            .all(|w| w[0].signer < w[1].signer);
        if !distinct || cert.signatures.len() < self.min_signers() {
            return false;
        }
        if !cert
            .signatures
            .iter()
            .all(|s| s.signer < self.degrees.len() && keyring.verify(&cert.tx_id, s))
        {
            return false;
        }
        let weight: u64 = cert.signers().map(|r| self.degrees[r]).sum();
        weight == cert.weight_sum && weight >= self.weight_threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(i: u8) -> Digest {
        Digest::of(&[i])
    }

    #[test]
    fn honest_signature_verifies() {
        let keys = Keyring::new(4, 1);
        let sig = keys.sign(2, &tx(1));
        assert!(keys.verify(&tx(1), &sig));
        assert!(!keys.verify(&tx(2), &sig));
        assert_eq!(sig, keys.sign(2, &tx(1)));
        assert_ne!(sig.bytes, keys.sign(3, &tx(1)).bytes);
    }

    #[test]
    fn garbage_signature_rejected() {
        let keys = Keyring::new(4, 1);
        let sig = Signature {
            signer: 1,
            bytes: [0xAB; 32],
        };
        assert!(!keys.verify(&tx(1), &sig));
        let out_of_range = Signature {
            signer: 9,
            ..keys.sign(1, &tx(1))
        };
        assert!(!keys.verify(&tx(1), &out_of_range));
    }

    #[test]
    fn certificate_needs_count_and_weight() {
        let keys = Keyring::new(4, 3);
        let rule = QuorumRule {
            faults: 1,
            degrees: vec![5, 4, 3, 1],
            weight_threshold: 9,
        };
        let id = tx(7);
        let sigs: Vec<_> = (0..4).map(|r| keys.sign(r, &id)).collect();
        let full = rule.certify(&keys, &id, &sigs).unwrap();
        assert_eq!(full.signers().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(full.weight_sum, 13);
        // three signers but too light: 4 + 3 + 1 = 8 < 9
        assert!(rule.certify(&keys, &id, &sigs[1..]).is_none());
        // two signers: below 2f+1
        assert!(rule.certify(&keys, &id, &sigs[..2]).is_none());
        // duplicates count once
        let dup = vec![sigs[0], sigs[0], sigs[0], sigs[1]];
        assert!(rule.certify(&keys, &id, &dup).is_none());
    }

    #[test]
    fn adding_a_valid_signature_keeps_certificate() {
        let keys = Keyring::new(5, 3);
        let rule = QuorumRule::with_default_threshold(1, vec![4, 4, 3, 2, 2], 3.0);
        let id = tx(1);
        let sigs: Vec<_> = (0..5).map(|r| keys.sign(r, &id)).collect();
        let mut prev_weight = 0;
        for n in 1..=5 {
            let cert = rule.certify(&keys, &id, &sigs[..n]);
            if n >= 4 {
                let cert = cert.expect("any four honest signers certify");
                assert!(cert.weight_sum >= prev_weight);
                prev_weight = cert.weight_sum;
            }
        }
    }

    #[test]
    fn default_threshold_caps_at_lightest_honest_set() {
        let rule = QuorumRule::with_default_threshold(1, vec![9, 2, 2, 2], 4.0);
        // nominal 3·4 = 12, but the honest set {2,2,2} weighs only 6
        assert_eq!(rule.weight_threshold, 6);
        let rule = QuorumRule::with_default_threshold(1, vec![9, 8, 7, 6], 2.0);
        assert_eq!(rule.weight_threshold, 6);
    }

    #[test]
    fn certificate_bytes_round_trip_and_detect_flips() {
        let keys = Keyring::new(4, 3);
        let id = tx(9);
        let cert = QuorumCertificate {
            tx_id: id,
            signatures: (0..3).map(|r| keys.sign(r, &id)).collect(),
            weight_sum: 11,
        };
        let bytes = cert.to_bytes();
        assert_eq!(QuorumCertificate::from_bytes(&bytes).unwrap(), cert);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(
                QuorumCertificate::from_bytes(&bad).is_err(),
                "flip at {i} undetected"
            );
        }
    }
}
