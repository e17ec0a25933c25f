//! Blocks, transaction roots and header hashes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::Hash32;
use crate::tx::Transaction;

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

/// Merkle root over the given leaf encodings.
///
/// Leaves and inner nodes are hashed with distinct one-byte prefixes so a
/// leaf can never be confused with a node. An odd node at the end of a
/// level is carried up unchanged rather than paired with itself, which
/// would let two different transaction lists share a root. The root of an
/// empty list is the hash of the empty string.
pub fn merkle_root(leaves: &[Vec<u8>]) -> Hash32 {
    if leaves.is_empty() {
        return Hash32::digest(&[]);
    }
    let mut level: Vec<Hash32> = leaves
        .iter()
        .map(|l| Hash32::digest_parts(&[&[LEAF_PREFIX], l]))
        .collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => Hash32::digest_parts(&[&[NODE_PREFIX], &a.0, &b.0]),
                [a] => *a,
                _ => unreachable!("chunks(2)"),
            })
            .collect();
    }
    level[0]
}

pub fn tx_root(txs: &[Transaction]) -> Result<Hash32, CodecError> {
    let leaves = txs.iter().map(Canonical::to_canonical_bytes).collect::<Result<Vec<_>, _>>()?;
    Ok(merkle_root(&leaves))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Hash32,
    /// Logical milliseconds.
    pub timestamp: u64,
    pub tx_root: Hash32,
}

impl BlockHeader {
    /// `H(height ‖ prev_hash ‖ timestamp ‖ tx_root)` with big-endian integers.
    pub fn hash(&self) -> Hash32 {
        Hash32::digest_parts(&[
            &self.height.to_be_bytes(),
            &self.prev_hash.0,
            &self.timestamp.to_be_bytes(),
            &self.tx_root.0,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub block_hash: Hash32,
    pub txs: Vec<Transaction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("transaction root mismatch")]
    BadTxRoot,
    #[error("block hash mismatch")]
    BadBlockHash,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl Block {
    pub fn new(height: u64, prev_hash: Hash32, timestamp: u64, txs: Vec<Transaction>) -> Result<Self, CodecError> {
        let header = BlockHeader {
            height,
            prev_hash,
            timestamp,
            tx_root: tx_root(&txs)?,
        };
        Ok(Block {
            block_hash: header.hash(),
            header,
            txs,
        })
    }

    pub fn height(&self) -> u64 {
        self.header.height
    }

    /// Recomputes the transaction root and header hash.
    pub fn check_integrity(&self) -> Result<(), BlockError> {
        if tx_root(&self.txs)? != self.header.tx_root {
            return Err(BlockError::BadTxRoot);
        }
        if self.header.hash() != self.block_hash {
            return Err(BlockError::BadBlockHash);
        }
        Ok(())
    }
}

impl Canonical for Block {
    fn encode_into(&self, enc: &mut Encoder) -> Result<(), CodecError> {
        enc.u64(self.header.height);
        enc.fixed(&self.header.prev_hash.0);
        enc.u64(self.header.timestamp);
        enc.fixed(&self.header.tx_root.0);
        enc.fixed(&self.block_hash.0);
        enc.len("txs", self.txs.len())?;
        for tx in &self.txs {
            enc.bytes("tx", &tx.to_canonical_bytes()?)?;
        }
        Ok(())
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let header = BlockHeader {
            height: dec.u64()?,
            prev_hash: Hash32(dec.array()?),
            timestamp: dec.u64()?,
            tx_root: Hash32(dec.array()?),
        };
        let block_hash = Hash32(dec.array()?);
        let txs = dec.seq(|d| Transaction::from_canonical_bytes(&d.bytes()?))?;
        Ok(Block {
            header,
            block_hash,
            txs,
        })
    }
}
