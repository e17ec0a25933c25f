mod common;

use ces_chain::codec::Canonical;
use ces_chain::ledger::{export_blocks, import_blocks, segment_files, validate_chain, verify_dir, LedgerError};
use ces_chain::{Block, Hash32, Ledger};
use common::{busy_ledger, Harness};
use proptest::prelude::*;

#[test]
fn genesis_with_zero_prev_hash_is_accepted() {
    let mut h = Harness::new();
    let genesis = Block::new(0, Hash32::ZERO, 0, h.genesis(100, 1)).unwrap();
    let mut ledger = Ledger::new();
    let receipts = ledger.append_block(genesis).unwrap();
    assert!(receipts.iter().all(|r| r.applied()));
    assert!(ledger.validate().is_ok());
}

#[test]
fn genesis_with_nonzero_prev_hash_is_rejected() {
    let mut h = Harness::new();
    let block = Block::new(0, Hash32::digest(b"x"), 0, h.genesis(100, 1)).unwrap();
    assert_eq!(Ledger::new().append_block(block).unwrap_err(), LedgerError::BadPrevHash { height: 0 });
}

#[test]
fn flipped_byte_in_tx_list_fails_the_tx_root() {
    let mut h = Harness::new();
    let mut block = Block::new(0, Hash32::ZERO, 0, h.genesis(100, 1)).unwrap();
    block.txs[1].tx_id.push('x');
    let mut ledger = Ledger::new();
    assert_eq!(ledger.append_block(block).unwrap_err(), LedgerError::BadTxRoot { height: 0 });
    assert!(ledger.is_empty());
    assert_eq!(ledger.state().version, 0);
}

#[test]
fn height_gap_is_rejected() {
    let mut ledger = busy_ledger(3);
    let skip = Block::new(4, ledger.tip_hash(), 0, vec![]).unwrap();
    assert_eq!(
        ledger.append_block(skip).unwrap_err(),
        LedgerError::HeightGap { expected: 3, got: 4 }
    );
}

#[test]
fn untampered_chain_validates() {
    let ledger = busy_ledger(100);
    assert_eq!(ledger.len(), 100);
    assert!(validate_chain(ledger.blocks()).is_ok());
    assert!(validate_chain(&ledger.blocks()[..1]).is_ok());
    assert!(validate_chain(&[]).is_ok());
}

#[test]
fn tampered_tx_reports_its_block() {
    let ledger = busy_ledger(100);
    let mut blocks = ledger.blocks().to_vec();
    blocks[42].txs[0].timestamp += 1;
    assert_eq!(validate_chain(&blocks).unwrap_err().height, 42);
}

#[test]
fn tampered_header_reports_its_block() {
    let ledger = busy_ledger(50);
    let mut blocks = ledger.blocks().to_vec();
    blocks[17].header.timestamp += 1;
    assert_eq!(validate_chain(&blocks).unwrap_err().height, 17);
}

#[test]
fn replay_reproduces_the_state_hash() {
    let ledger = busy_ledger(60);
    let replayed = Ledger::replay(ledger.blocks().to_vec()).unwrap();
    assert_eq!(replayed.state_hash(), ledger.state_hash());
    assert_eq!(replayed.state(), ledger.state());
}

#[test]
fn export_import_round_trips_bit_exactly() {
    let ledger = busy_ledger(100);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = export_blocks(ledger.blocks(), a.path(), 16).unwrap();
    assert_eq!(files.len(), 7);
    let blocks = import_blocks(a.path()).unwrap();
    assert_eq!(blocks, ledger.blocks());
    export_blocks(&blocks, b.path(), 16).unwrap();
    for (x, y) in segment_files(a.path()).unwrap().iter().zip(segment_files(b.path()).unwrap()) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let report = verify_dir(a.path()).unwrap();
    assert!(report.ok);
    assert_eq!(report.blocks, 100);
    assert_eq!(report.tip_hash, Some(ledger.tip_hash()));
}

#[test]
fn find_tx_locates_block_and_receipt() {
    let ledger = busy_ledger(10);
    let (height, tx, receipt) = ledger.find_tx("tx-00007").unwrap();
    assert_eq!(tx.tx_id, "tx-00007");
    assert_eq!(receipt.tx_id, "tx-00007");
    assert!(height > 0);
    assert!(ledger.find_tx("missing").is_none());
}

/// Byte ranges of each block's record (length prefix included) in the
/// segment files written with `per_segment` blocks per file.
fn record_spans(blocks: &[Block], per_segment: usize) -> Vec<(usize, usize, usize, u64)> {
    let mut spans = Vec::new();
    for (seg, chunk) in blocks.chunks(per_segment).enumerate() {
        // the segment header is attributed to the segment's first block
        let mut pos = 0;
        for (i, b) in chunk.iter().enumerate() {
            let start = pos;
            pos += if i == 0 { 13 } else { 0 } + 4 + b.to_canonical_bytes().unwrap().len();
            spans.push((seg, start, pos, b.height()));
        }
    }
    spans
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any single flipped byte is caught at exactly the block that holds it.
    #[test]
    fn single_byte_tamper_is_detected_at_its_height(pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        static LEDGER: std::sync::OnceLock<Ledger> = std::sync::OnceLock::new();
        let ledger = LEDGER.get_or_init(|| busy_ledger(24));
        let dir = tempfile::tempdir().unwrap();
        let files = export_blocks(ledger.blocks(), dir.path(), 8).unwrap();
        let spans = record_spans(ledger.blocks(), 8);
        let total: usize = spans.iter().map(|(_, s, e, _)| e - s).sum();
        let mut target = pick.index(total);
        let (seg, offset, height) = spans
            .iter()
            .find_map(|(seg, s, e, h)| {
                if target < e - s { Some((*seg, s + target, *h)) } else { target -= e - s; None }
            })
            .unwrap();
        let mut bytes = std::fs::read(&files[seg]).unwrap();
        bytes[offset] ^= 1 << bit;
        std::fs::write(&files[seg], bytes).unwrap();
        let report = verify_dir(dir.path()).unwrap();
        prop_assert!(!report.ok);
        prop_assert_eq!(report.first_bad_height, Some(height), "{:?}", report.reason);
    }
}
