//! The ordering service: block cutter plus simulated PBFT.

use serde::{Deserialize, Serialize};

use crate::consensus::{run, Batch, ConsensusError, PbftConfig, RunReport};
use crate::crypto::Hash32;
use crate::cutter::{BlockCutter, CutterConfig};
use crate::ledger::{Ledger, LedgerError};
use crate::state::Receipt;
use crate::tx::Transaction;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderingConfig {
    pub pbft: PbftConfig,
    pub cutter: CutterConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum OrderingError {
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("honest orderers disagree at sequence {0}")]
    Divergence(u64),
}

/// A committed block and its receipts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedBlock {
    pub height: u64,
    pub block_hash: Hash32,
    pub receipts: Vec<Receipt>,
}

/// Cuts transactions into batches and orders them with a fresh simulated
/// PBFT run per submission round. Each round's seed is derived from the
/// configured seed and the round index, so a session is reproducible.
#[derive(Debug, Clone)]
pub struct OrderingService {
    config: OrderingConfig,
    rounds: u64,
    last_report: Option<RunReport>,
}

impl OrderingService {
    pub fn new(config: OrderingConfig) -> Self {
        Self {
            config,
            rounds: 0,
            last_report: None,
        }
    }

    pub fn config(&self) -> &OrderingConfig {
        &self.config
    }

    /// Report of the most recent consensus run.
    pub fn last_report(&self) -> Option<&RunReport> {
        self.last_report.as_ref()
    }

    /// Orders `txs` (in submission order, by their timestamps) into batches.
    pub fn order(&mut self, txs: Vec<Transaction>) -> Result<Vec<Batch>, OrderingError> {
        if txs.is_empty() {
            return Ok(Vec::new());
        }
        let mut cutter = BlockCutter::new(self.config.cutter);
        let mut batches = Vec::new();
        for tx in txs {
            let now = tx.timestamp;
            batches.extend(cutter.push(tx, now));
        }
        batches.extend(cutter.flush());

        let mut pbft = self.config.pbft.clone();
        pbft.seed = u64::from_be_bytes(
            Hash32::digest_parts(&[&pbft.seed.to_be_bytes(), &self.rounds.to_be_bytes()]).0[..8]
                .try_into()
                .expect("8 bytes"),
        );
        self.rounds += 1;
        let report = run(&pbft, &batches)?;
        if let Some(seq) = report.safety_violations().first() {
            return Err(OrderingError::Divergence(*seq));
        }
        let node = report.honest_nodes().next().expect("n = 3f + 1 leaves honest nodes");
        let ordered = report.batches[node].clone();
        self.last_report = Some(report);
        Ok(ordered)
    }

    /// Orders `txs` and appends one block per committed batch.
    pub fn commit(&mut self, ledger: &mut Ledger, txs: Vec<Transaction>) -> Result<Vec<CommittedBlock>, OrderingError> {
        let mut out = Vec::new();
        for batch in self.order(txs)? {
            if batch.txs.is_empty() {
                continue;
            }
            let timestamp = batch.txs.iter().map(|t| t.timestamp).max().unwrap_or(0);
            let receipts = ledger.commit(timestamp, batch.txs)?.to_vec();
            out.push(CommittedBlock {
                height: ledger.len() - 1,
                block_hash: ledger.tip_hash(),
                receipts,
            });
        }
        Ok(out)
    }
}
