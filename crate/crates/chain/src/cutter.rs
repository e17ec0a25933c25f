//! Groups submitted transactions into batches for ordering.

use serde::{Deserialize, Serialize};

use crate::consensus::Batch;
use crate::tx::Transaction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutterConfig {
    /// Cut as soon as a batch holds this many transactions.
    pub max_txs: usize,
    /// Cut a non-empty batch once its oldest transaction is this old (ms).
    pub timeout_ms: u64,
}

impl Default for CutterConfig {
    fn default() -> Self {
        Self {
            max_txs: 10,
            timeout_ms: 500,
        }
    }
}

/// Cuts a batch every `max_txs` transactions or `timeout_ms` after the
/// first transaction of the batch, whichever comes first. Time is the
/// caller's logical clock.
#[derive(Debug, Clone)]
pub struct BlockCutter {
    config: CutterConfig,
    pending: Vec<Transaction>,
    opened_at: Option<u64>,
    next_id: u64,
}

impl BlockCutter {
    pub fn new(config: CutterConfig) -> Self {
        Self {
            config: CutterConfig {
                max_txs: config.max_txs.max(1),
                ..config
            },
            pending: Vec::new(),
            opened_at: None,
            next_id: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn cut(&mut self) -> Option<Batch> {
        if self.pending.is_empty() {
            return None;
        }
        self.opened_at = None;
        let batch = Batch {
            id: self.next_id,
            txs: std::mem::take(&mut self.pending),
        };
        self.next_id += 1;
        Some(batch)
    }

    /// Batches that are due at `now` without any new transaction.
    pub fn tick(&mut self, now: u64) -> Option<Batch> {
        match self.opened_at {
            Some(t) if now.saturating_sub(t) >= self.config.timeout_ms => self.cut(),
            _ => None,
        }
    }

    /// Adds a transaction received at `now`; returns any batches cut.
    pub fn push(&mut self, tx: Transaction, now: u64) -> Vec<Batch> {
        let mut out: Vec<Batch> = self.tick(now).into_iter().collect();
        self.opened_at.get_or_insert(now);
        self.pending.push(tx);
        if self.pending.len() >= self.config.max_txs {
            out.extend(self.cut());
        }
        out
    }

    pub fn flush(&mut self) -> Option<Batch> {
        self.cut()
    }
}
