//! The block chain, its world state, and block files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{Block, BlockError};
use crate::codec::{Canonical, CodecError};
use crate::crypto::Hash32;
use crate::state::{Receipt, WorldState};
use crate::tx::Transaction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("height gap: expected block {expected}, got {got}")]
    HeightGap { expected: u64, got: u64 },
    #[error("block {height}: previous hash does not match the chain tip")]
    BadPrevHash { height: u64 },
    #[error("block {height}: transaction root mismatch")]
    BadTxRoot { height: u64 },
    #[error("block {height}: block hash mismatch")]
    BadBlockHash { height: u64 },
    #[error("block {height}: {source}")]
    Codec { height: u64, source: CodecError },
}

impl LedgerError {
    pub fn height(&self) -> u64 {
        match self {
            LedgerError::HeightGap { got: height, .. }
            | LedgerError::BadPrevHash { height }
            | LedgerError::BadTxRoot { height }
            | LedgerError::BadBlockHash { height }
            | LedgerError::Codec { height, .. } => *height,
        }
    }
}

/// Checks a block's header against the expected height and predecessor hash.
fn check_header(block: &Block, expected_height: u64, prev_hash: Hash32) -> Result<(), LedgerError> {
    let height = block.height();
    if height != expected_height {
        return Err(LedgerError::HeightGap {
            expected: expected_height,
            got: height,
        });
    }
    if block.header.prev_hash != prev_hash {
        return Err(LedgerError::BadPrevHash { height });
    }
    block.check_integrity().map_err(|e| match e {
        BlockError::BadTxRoot => LedgerError::BadTxRoot { height },
        BlockError::BadBlockHash => LedgerError::BadBlockHash { height },
        BlockError::Codec(source) => LedgerError::Codec { height, source },
    })
}

/// First structural fault in a block sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFault {
    pub height: u64,
    pub reason: String,
}

/// Re-scans hash links and transaction roots from genesis.
pub fn validate_chain(blocks: &[Block]) -> Result<(), ChainFault> {
    let mut prev = Hash32::ZERO;
    for (i, block) in blocks.iter().enumerate() {
        check_header(block, i as u64, prev).map_err(|e| ChainFault {
            height: i as u64,
            reason: e.to_string(),
        })?;
        prev = block.block_hash;
    }
    Ok(())
}

/// An append-only chain with the world state it implies.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    blocks: Vec<Block>,
    receipts: Vec<Vec<Receipt>>,
    state: WorldState,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a ledger by appending `blocks` to a fresh world state.
    pub fn replay(blocks: impl IntoIterator<Item = Block>) -> Result<Self, LedgerError> {
        let mut ledger = Ledger::new();
        for block in blocks {
            ledger.append_block(block)?;
        }
        Ok(ledger)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn receipts(&self, height: u64) -> Option<&[Receipt]> {
        self.receipts.get(height as usize).map(Vec::as_slice)
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Number of blocks.
    pub fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip_hash(&self) -> Hash32 {
        self.blocks.last().map_or(Hash32::ZERO, |b| b.block_hash)
    }

    pub fn state_hash(&self) -> Hash32 {
        self.state.state_hash()
    }

    /// Builds the next block on the current tip.
    pub fn next_block(&self, timestamp: u64, txs: Vec<Transaction>) -> Result<Block, CodecError> {
        Block::new(self.len(), self.tip_hash(), timestamp, txs)
    }

    /// Verifies the header and re-executes every transaction. A valid header
    /// always appends the block; individual transactions may be rejected,
    /// which the receipts record.
    pub fn append_block(&mut self, block: Block) -> Result<&[Receipt], LedgerError> {
        check_header(&block, self.len(), self.tip_hash())?;
        let receipts: Vec<Receipt> = block.txs.iter().map(|tx| self.state.apply(tx)).collect();
        for r in receipts.iter().filter(|r| !r.applied()) {
            log::debug!("block {}: tx {} rejected: {:?}", block.height(), r.tx_id, r.outcome);
        }
        self.blocks.push(block);
        self.receipts.push(receipts);
        Ok(self.receipts.last().expect("just pushed"))
    }

    /// Appends a block holding `txs` on the current tip.
    pub fn commit(&mut self, timestamp: u64, txs: Vec<Transaction>) -> Result<&[Receipt], LedgerError> {
        let height = self.len();
        let block = self
            .next_block(timestamp, txs)
            .map_err(|source| LedgerError::Codec { height, source })?;
        self.append_block(block)
    }

    pub fn validate(&self) -> Result<(), ChainFault> {
        validate_chain(&self.blocks)
    }

    /// Finds the block and receipt for a transaction id.
    pub fn find_tx(&self, tx_id: &str) -> Option<(u64, &Transaction, &Receipt)> {
        self.blocks.iter().zip(&self.receipts).find_map(|(b, rs)| {
            b.txs
                .iter()
                .zip(rs)
                .find(|(tx, _)| tx.tx_id == tx_id)
                .map(|(tx, r)| (b.height(), tx, r))
        })
    }
}

pub const SEGMENT_MAGIC: &[u8; 4] = b"CESL";
pub const SEGMENT_VERSION: u8 = 1;
pub const DEFAULT_SEGMENT_BLOCKS: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("block {height}: {reason}")]
    Corrupt { height: u64, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn segment_name(index: usize) -> String {
    format!("segment-{index:06}.cesl")
}

/// Writes blocks as segment files of at most `per_segment` blocks each.
///
/// Segment layout: magic `CESL`, a version byte, the first block height
/// (u64 BE), then records of `[u32 BE length][canonical block]`.
pub fn export_blocks(blocks: &[Block], dir: &Path, per_segment: usize) -> Result<Vec<PathBuf>, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let per_segment = per_segment.max(1);
    let mut paths = Vec::new();
    for (i, chunk) in blocks.chunks(per_segment).enumerate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(SEGMENT_MAGIC);
        bytes.push(SEGMENT_VERSION);
        bytes.extend_from_slice(&chunk[0].height().to_be_bytes());
        for block in chunk {
            let encoded = block.to_canonical_bytes()?;
            let len = u32::try_from(encoded.len()).map_err(|_| CodecError::Unencodable {
                field: "block",
                reason: "block exceeds 4 GiB".into(),
            })?;
            bytes.extend_from_slice(&len.to_be_bytes());
            bytes.extend_from_slice(&encoded);
        }
        let path = dir.join(segment_name(i));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Segment files in `dir`, in name order.
pub fn segment_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cesl"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Parses one segment whose first block should be `expected_height`.
/// Errors name the height of the record that could not be read.
pub fn parse_segment(bytes: &[u8], expected_height: u64) -> Result<Vec<Block>, StoreError> {
    let corrupt = |height: u64, reason: String| StoreError::Corrupt { height, reason };
    if bytes.len() < 13 || &bytes[..4] != SEGMENT_MAGIC {
        return Err(corrupt(expected_height, "bad segment magic".into()));
    }
    if bytes[4] != SEGMENT_VERSION {
        return Err(corrupt(expected_height, format!("unsupported segment version {}", bytes[4])));
    }
    let first = u64::from_be_bytes(bytes[5..13].try_into().expect("8 bytes"));
    if first != expected_height {
        return Err(corrupt(expected_height, format!("segment starts at {first}")));
    }
    let mut blocks = Vec::new();
    let mut pos = 13;
    while pos < bytes.len() {
        let height = expected_height + blocks.len() as u64;
        if bytes.len() - pos < 4 {
            return Err(corrupt(height, "truncated record length".into()));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        if bytes.len() - pos < len {
            return Err(corrupt(height, "truncated record".into()));
        }
        let block = Block::from_canonical_bytes(&bytes[pos..pos + len]).map_err(|e| corrupt(height, e.to_string()))?;
        blocks.push(block);
        pos += len;
    }
    if blocks.is_empty() {
        return Err(corrupt(expected_height, "empty segment".into()));
    }
    Ok(blocks)
}

/// Reads every segment in `dir`.
pub fn import_blocks(dir: &Path) -> Result<Vec<Block>, StoreError> {
    let mut blocks = Vec::new();
    for path in segment_files(dir)? {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        blocks.extend(parse_segment(&bytes, blocks.len() as u64)?);
    }
    Ok(blocks)
}

/// Result of verifying a block directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Blocks read before the first fault (or all of them).
    pub blocks: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_bad_height: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tip_hash: Option<Hash32>,
}

/// Reads a block directory and validates the chain. Decoding failures and
/// chain faults both report the first bad height.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport, StoreError> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut fault = None;
    for path in segment_files(dir)? {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        match parse_segment(&bytes, blocks.len() as u64) {
            Ok(b) => blocks.extend(b),
            Err(StoreError::Corrupt { height, reason }) => {
                fault = Some(ChainFault { height, reason });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    // a structural fault may precede the unreadable record
    if let Err(f) = validate_chain(&blocks) {
        fault = Some(f);
    }
    Ok(match fault {
        None => VerifyReport {
            blocks: blocks.len() as u64,
            ok: true,
            first_bad_height: None,
            reason: None,
            tip_hash: blocks.last().map(|b| b.block_hash),
        },
        Some(f) => VerifyReport {
            blocks: blocks.len() as u64,
            ok: false,
            first_bad_height: Some(f.height),
            reason: Some(f.reason),
            tip_hash: None,
        },
    })
}
