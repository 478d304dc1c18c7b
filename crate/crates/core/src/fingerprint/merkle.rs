//! Binary SHA-256 Merkle trees.
//!
//! Parents are `SHA-256(left ‖ right)`. A level with an odd number of nodes
//! pairs its last node with a copy of itself. A single leaf `h` therefore
//! has root `SHA-256(h ‖ h)`.

use serde::{Deserialize, Serialize};

use super::{Fingerprint, FingerprintError};
use crate::hash::Digest;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` holds the leaves, the last level holds only the root.
    levels: Vec<Vec<Digest>>,
}

/// Position of a sibling relative to the running hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: usize,
    pub path: Vec<(Digest, Side)>,
}

fn parent(left: &Digest, right: &Digest) -> Digest {
    Digest::of_parts(&[left.as_bytes(), right.as_bytes()])
}

impl MerkleTree {
    pub fn root(&self) -> Digest {
        self.levels.last().expect("tree has a root level")[0]
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Vec<Digest>] {
        &self.levels
    }
}

pub fn build_merkle(leaves: &[Fingerprint]) -> Result<MerkleTree, FingerprintError> {
    if leaves.is_empty() {
        return Err(FingerprintError::EmptyLeaves);
    }
    let mut levels = vec![leaves.to_vec()];
    loop {
        let current = levels.last().unwrap();
        if current.len() == 1 && levels.len() > 1 {
            break;
        }
        let next = current
            .chunks(2)
            .map(|pair| parent(&pair[0], pair.get(1).unwrap_or(&pair[0])))
            .collect();
        levels.push(next);
    }
    Ok(MerkleTree { levels })
}

pub fn prove_leaf(tree: &MerkleTree, index: usize) -> Result<MerkleProof, FingerprintError> {
    let len = tree.leaves().len();
    if index >= len {
        return Err(FingerprintError::IndexOutOfRange { index, len });
    }
    let mut path = Vec::with_capacity(tree.levels.len() - 1);
    let mut i = index;
    for level in &tree.levels[..tree.levels.len() - 1] {
        let sibling_index = i ^ 1;
        let sibling = *level.get(sibling_index).unwrap_or(&level[i]);
        let side = if i.is_multiple_of(2) {
            Side::Right
        } else {
            Side::Left
        };
        path.push((sibling, side));
        i /= 2;
    }
    Ok(MerkleProof {
        leaf_index: index,
        path,
    })
}

/// Replays `proof` from `leaf` and compares with `root`.
pub fn verify_proof(root: &Digest, leaf: &Fingerprint, proof: &MerkleProof) -> bool {
    let mut acc = *leaf;
    let mut i = proof.leaf_index;
    for (sibling, side) in &proof.path {
        let expected_side = if i.is_multiple_of(2) {
            Side::Right
        } else {
            Side::Left
        };
        if *side != expected_side {
            return false;
        }
        acc = match side {
            Side::Right => parent(&acc, sibling),
            Side::Left => parent(sibling, &acc),
        };
        i /= 2;
    }
    i == 0 && acc == *root
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaves(n: usize) -> Vec<Digest> {
        (0..n)
            .map(|i| Digest::of(format!("leaf-{i}").as_bytes()))
            .collect()
    }

    #[test]
    fn empty_rejected() {
        assert_eq!(build_merkle(&[]), Err(FingerprintError::EmptyLeaves));
    }

    #[test]
    fn single_leaf_root_is_self_pair() {
        let h = Digest::of(b"leaf");
        let tree = build_merkle(&[h]).unwrap();
        // python: sha256(sha256(b'leaf') * 2)
        assert_eq!(
            tree.root().to_hex(),
            "88515636ce744ac3686f1751c5cee47aa572de0a6422fe7ddd14c75699eea279"
        );
        let proof = prove_leaf(&tree, 0).unwrap();
        assert!(verify_proof(&tree.root(), &h, &proof));
    }

    #[test]
    fn two_leaves_single_parent() {
        let l = leaves(2);
        let tree = build_merkle(&l).unwrap();
        assert_eq!(
            tree.root(),
            Digest::of_parts(&[l[0].as_bytes(), l[1].as_bytes()])
        );
    }

    #[test]
    fn swapping_leaves_changes_root() {
        let mut l = leaves(8);
        let before = build_merkle(&l).unwrap().root();
        l.swap(2, 5);
        assert_ne!(before, build_merkle(&l).unwrap().root());
    }

    #[test]
    fn proof_path_length_is_ceil_log2() {
        for n in 2..=33usize {
            let tree = build_merkle(&leaves(n)).unwrap();
            let expected = (n as f64).log2().ceil() as usize;
            for i in 0..n {
                assert_eq!(prove_leaf(&tree, i).unwrap().path.len(), expected, "n={n}");
            }
        }
    }

    #[test]
    fn honest_proofs_for_sixteen_leaves() {
        let l = leaves(16);
        let tree = build_merkle(&l).unwrap();
        for (i, leaf) in l.iter().enumerate() {
            assert!(verify_proof(
                &tree.root(),
                leaf,
                &prove_leaf(&tree, i).unwrap()
            ));
        }
    }

    #[test]
    fn bit_flipped_leaf_rejected() {
        let l = leaves(16);
        let tree = build_merkle(&l).unwrap();
        let mut bad = l[7];
        bad.0[0] ^= 1;
        assert!(!verify_proof(
            &tree.root(),
            &bad,
            &prove_leaf(&tree, 7).unwrap()
        ));
    }

    #[test]
    fn proof_for_other_index_rejected() {
        let l = leaves(8);
        let tree = build_merkle(&l).unwrap();
        let proof = prove_leaf(&tree, 3).unwrap();
        assert!(!verify_proof(&tree.root(), &l[5], &proof));
    }

    #[test]
    fn out_of_range_index() {
        let tree = build_merkle(&leaves(3)).unwrap();
        assert_eq!(
            prove_leaf(&tree, 3),
            Err(FingerprintError::IndexOutOfRange { index: 3, len: 3 })
        );
    }

    #[test]
    fn exhaustive_soundness_up_to_32_leaves() {
        for n in 1..=32usize {
            let l = leaves(n);
            let tree = build_merkle(&l).unwrap();
            for i in 0..n {
                let proof = prove_leaf(&tree, i).unwrap();
                assert!(verify_proof(&tree.root(), &l[i], &proof));
                for j in 0..n {
                    if l[j] != l[i] {
                        assert!(
                            !verify_proof(&tree.root(), &l[j], &proof),
                            "n={n} i={i} j={j}"
                        );
                    }
                }
                for step in 0..proof.path.len() {
                    let mut corrupted = proof.clone();
                    corrupted.path[step].0 .0[31] ^= 0x80;
                    // a corrupted duplicate of the running hash is still a change
                    assert!(
                        !verify_proof(&tree.root(), &l[i], &corrupted),
                        "n={n} i={i} step={step}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn random_corruptions_rejected(n in 1usize..40, pick in any::<prop::sample::Index>(), byte in 0usize..32, bit in 0u8..8) {
            let l = leaves(n);
            let tree = build_merkle(&l).unwrap();
            let i = pick.index(n);
            let proof = prove_leaf(&tree, i).unwrap();
            let mut leaf = l[i];
            leaf.0[byte] ^= 1 << bit;
            prop_assert!(!verify_proof(&tree.root(), &leaf, &proof));
        }
    }
}
