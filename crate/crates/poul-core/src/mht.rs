//! SHA-256 Merkle hash tree baseline.
//!
//! Used only as the comparison point for the authenticated-layer benchmarks:
//! updates and proofs cost `ceil(log2 n)` internal hash recomputations each,
//! versus the filter's O(1) operations. Leaves are hashed on ingestion;
//! missing leaves at the padded power-of-two width use a fixed null hash.

use thiserror::Error;

use crate::crypto::{sha256, sha256_parts};

/// Padding value for absent leaves and the deletion marker.
pub const NULL_LEAF: [u8; 32] = [0u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MhtError {
    #[error("leaf index {index} out of range for {leaves} leaves")]
    IndexOutOfRange { index: usize, leaves: usize },
    #[error("tree has no leaves")]
    Empty,
}

/// Flat-array Merkle tree. `nodes` stores levels bottom-up: leaves first,
/// then each parent level, ending with the root.
#[derive(Debug)]
pub struct MerkleTree {
    leaf_count: usize,
    padded: usize,
    depth: usize,
    nodes: Vec<[u8; 32]>,
    path_hashes: u64,
}

impl MerkleTree {
    /// Builds a tree over the given leaf payloads. Each payload is hashed
    /// into its leaf node; the leaf array is padded to a power of two with
    /// [`NULL_LEAF`].
    pub fn build<T: AsRef<[u8]>>(leaves: &[T]) -> Result<Self, MhtError> {
        if leaves.is_empty() {
            return Err(MhtError::Empty);
        }
        let padded = leaves.len().next_power_of_two();
        let depth = padded.trailing_zeros() as usize;
        let mut nodes = vec![[0u8; 32]; 2 * padded - 1];
        for (i, leaf) in leaves.iter().enumerate() {
            nodes[i] = sha256(leaf.as_ref());
        }
        for node in nodes.iter_mut().take(padded).skip(leaves.len()) {
            *node = NULL_LEAF;
        }
        let mut tree = Self { leaf_count: leaves.len(), padded, depth, nodes, path_hashes: 0 };
        tree.rebuild_internal();
        Ok(tree)
    }

    fn rebuild_internal(&mut self) {
        let mut level_start = 0usize;
        let mut level_len = self.padded;
        while level_len > 1 {
            let next_start = level_start + level_len;
            for i in 0..level_len / 2 {
                let l = self.nodes[level_start + 2 * i];
                let r = self.nodes[level_start + 2 * i + 1];
                self.nodes[next_start + i] = sha256_parts(&[&l, &r]);
            }
            level_start = next_start;
            level_len /= 2;
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root(&self) -> [u8; 32] {
        self.nodes[self.nodes.len() - 1]
    }

    /// Internal hash evaluations spent on update/delete paths so far.
    pub fn path_hash_count(&self) -> u64 {
        self.path_hashes
    }

    fn check_index(&self, index: usize) -> Result<(), MhtError> {
        if index >= self.leaf_count {
            return Err(MhtError::IndexOutOfRange { index, leaves: self.leaf_count });
        }
        Ok(())
    }

    fn set_leaf_node(&mut self, index: usize, node: [u8; 32]) -> [u8; 32] {
        self.nodes[index] = node;
        // Recompute the path to the root: exactly `depth` internal hashes.
        let mut level_start = 0usize;
        let mut level_len = self.padded;
        let mut pos = index;
        while level_len > 1 {
            let sibling = pos ^ 1;
            let (l, r) = if pos & 1 == 0 {
                (self.nodes[level_start + pos], self.nodes[level_start + sibling])
            } else {
                (self.nodes[level_start + sibling], self.nodes[level_start + pos])
            };
            let parent_start = level_start + level_len;
            let parent_pos = pos / 2;
            self.nodes[parent_start + parent_pos] = sha256_parts(&[&l, &r]);
            self.path_hashes += 1;
            level_start = parent_start;
            level_len /= 2;
            pos = parent_pos;
        }
        self.root()
    }

    /// Replaces leaf `index` with the hash of `value` and recomputes the
    /// root path (`depth` internal hash evaluations). Returns the new root.
    pub fn update_leaf(&mut self, index: usize, value: &[u8]) -> Result<[u8; 32], MhtError> {
        self.check_index(index)?;
        let node = sha256(value);
        Ok(self.set_leaf_node(index, node))
    }

    /// Marks leaf `index` deleted by writing the null marker; same path cost
    /// as an update. Returns the new root.
    pub fn delete_leaf(&mut self, index: usize) -> Result<[u8; 32], MhtError> {
        self.check_index(index)?;
        Ok(self.set_leaf_node(index, NULL_LEAF))
    }

    /// Sibling path from leaf `index` to the root (`depth` nodes).
    pub fn prove_membership(&self, index: usize) -> Result<Vec<[u8; 32]>, MhtError> {
        self.check_index(index)?;
        let mut path = Vec::with_capacity(self.depth);
        let mut level_start = 0usize;
        let mut level_len = self.padded;
        let mut pos = index;
        while level_len > 1 {
            path.push(self.nodes[level_start + (pos ^ 1)]);
            level_start += level_len;
            level_len /= 2;
            pos /= 2;
        }
        Ok(path)
    }

    /// Verifies a membership path for a raw leaf payload against a root.
    pub fn verify_path(
        root: &[u8; 32],
        leaf_value: &[u8],
        index: usize,
        path: &[[u8; 32]],
    ) -> bool {
        let mut node = sha256(leaf_value);
        let mut pos = index;
        for sibling in path {
            node = if pos & 1 == 0 {
                sha256_parts(&[&node, sibling])
            } else {
                sha256_parts(&[sibling, &node])
            };
            pos /= 2;
        }
        &node == root
    }
}
