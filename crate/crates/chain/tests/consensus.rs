mod common;

use ces_chain::consensus::{run, Batch, Behavior, ConsensusError, FaultSpec, Message, OrdererNode, PbftConfig};
use ces_chain::cutter::{BlockCutter, CutterConfig};
use ces_chain::ordering::{OrderingConfig, OrderingService};
use ces_chain::Ledger;
use common::Harness;

fn batches(k: usize) -> Vec<Batch> {
    let mut h = Harness::new();
    let txs = h.genesis(1_000_000, 3 * k);
    txs.chunks(3)
        .take(k)
        .enumerate()
        .map(|(i, c)| Batch {
            id: i as u64,
            txs: c.to_vec(),
        })
        .collect()
}

fn config(seed: u64, faults: FaultSpec) -> PbftConfig {
    PbftConfig {
        seed,
        faults,
        ..PbftConfig::default()
    }
}

#[test]
fn fault_free_run_commits_identical_sequences() {
    let input = batches(5);
    let report = run(&config(7, FaultSpec::default()), &input).unwrap();
    assert!(report.completed);
    assert_eq!(report.view_changes, 0);
    for node in 0..4 {
        assert_eq!(report.committed[node].len(), 5);
        assert_eq!(report.committed[node], report.committed[0]);
        assert_eq!(report.batches[node], input);
    }
    assert!(report.safety_violations().is_empty());
}

#[test]
fn leader_proposes_and_non_leader_cannot() {
    let cfg = PbftConfig::default();
    let mut leader = OrdererNode::new(0, &cfg);
    let batch = batches(1).remove(0);
    let out = leader.propose(batch.clone()).unwrap();
    assert_eq!(out.len(), 3);
    match &out[0].msg {
        Message::PrePrepare { view, seq, digest, .. } => {
            assert_eq!((*view, *seq), (0, 1));
            assert_eq!(*digest, batch.digest());
        }
        other => panic!("{other:?}"),
    }
    let mut backup = OrdererNode::new(1, &cfg);
    assert!(matches!(backup.propose(batch), Err(ConsensusError::NotLeader { node: 1, view: 0 })));
}

#[test]
fn honest_node_commits_on_three_matching_commits() {
    let cfg = PbftConfig::default();
    let batch = batches(1).remove(0);
    let digest = batch.digest();
    let mut node = OrdererNode::new(1, &cfg);
    node.handle_message(0, Message::PrePrepare { view: 0, seq: 1, digest, batch }, 1);
    node.handle_message(2, Message::Prepare { view: 0, seq: 1, digest }, 2);
    assert!(node.committed().is_empty());
    // prepared now: the leader's proposal, its own and node 2's prepare
    node.handle_message(0, Message::Commit { view: 0, seq: 1, digest }, 3);
    assert!(node.committed().is_empty());
    node.handle_message(2, Message::Commit { view: 0, seq: 1, digest }, 4);
    assert_eq!(node.committed().len(), 1);
}

#[test]
fn conflicting_preprepare_is_flagged_and_only_first_prepared() {
    let cfg = PbftConfig::default();
    let mut b = batches(2);
    let (first, second) = (b.remove(0), b.remove(0));
    let mut node = OrdererNode::new(1, &cfg);
    let out = node.handle_message(
        0,
        Message::PrePrepare { view: 0, seq: 1, digest: first.digest(), batch: first.clone() },
        1,
    );
    assert!(out.iter().all(|o| matches!(o.msg, Message::Prepare { digest, .. } if digest == first.digest())));
    let out = node.handle_message(
        0,
        Message::PrePrepare { view: 0, seq: 1, digest: second.digest(), batch: second },
        2,
    );
    assert!(out.iter().all(|o| !matches!(o.msg, Message::Prepare { .. })));
    assert_eq!(node.equivocations_flagged, 1);
}

#[test]
fn proposal_with_wrong_digest_is_counted_malformed() {
    let cfg = PbftConfig::default();
    let mut b = batches(2);
    let mut node = OrdererNode::new(1, &cfg);
    let digest = b[1].digest();
    node.handle_message(0, Message::PrePrepare { view: 0, seq: 1, digest, batch: b.remove(0) }, 1);
    assert_eq!(node.malformed, 1);
}

#[test]
fn one_crash_fault_still_commits_everything() {
    for crashed in 0..4 {
        for seed in 0..10 {
            let cfg = config(seed, FaultSpec { crash: vec![crashed], ..Default::default() });
            let report = run(&cfg, &batches(5)).unwrap_or_else(|e| panic!("crash {crashed} seed {seed}: {e}"));
            assert!(report.view_changes <= 2, "crash {crashed} seed {seed}: {} view changes", report.view_changes);
            if crashed == 0 {
                assert!(report.view_changes >= 1);
            }
            for node in report.honest_nodes() {
                assert_eq!(report.committed[node].len(), 5);
            }
            assert!(report.safety_violations().is_empty());
        }
    }
}

#[test]
fn two_crash_faults_stall_and_say_so() {
    let cfg = PbftConfig {
        max_steps: 5_000,
        ..config(3, FaultSpec { crash: vec![1, 2], ..Default::default() })
    };
    match run(&cfg, &batches(3)) {
        Err(ConsensusError::Stalled { steps, report, .. }) => {
            assert_eq!(steps, 5_000);
            assert!(!report.completed);
            assert!(report.committed.iter().all(Vec::is_empty));
        }
        other => panic!("expected a stall, got {other:?}"),
    }
}

#[test]
fn equivocating_leader_never_splits_honest_nodes() {
    for seed in 0..200 {
        let cfg = PbftConfig {
            max_steps: 50_000,
            trace: false,
            ..config(seed, FaultSpec { equivocate: vec![0], ..Default::default() })
        };
        let report = match run(&cfg, &batches(4)) {
            Ok(r) => r,
            Err(ConsensusError::Stalled { report, .. }) => *report,
            Err(e) => panic!("{e}"),
        };
        assert!(report.safety_violations().is_empty(), "seed {seed}");
    }
}

#[test]
fn message_drops_are_survivable() {
    let cfg = PbftConfig {
        drop_probability: 0.05,
        ..config(11, FaultSpec::default())
    };
    let report = run(&cfg, &batches(5)).unwrap();
    assert!(report.messages_dropped > 0);
    assert!(report.safety_violations().is_empty());
}

#[test]
fn same_seed_same_trace() {
    let cfg = config(5, FaultSpec { crash: vec![0], ..Default::default() });
    let a = run(&cfg, &batches(5)).unwrap();
    let b = run(&cfg, &batches(5)).unwrap();
    assert_eq!(a.trace_jsonl(), b.trace_jsonl());
    assert!(!a.trace.is_empty());
    let lines: Vec<serde_json::Value> = a.trace_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["event"], "timeout");
    let delivery = lines.iter().find(|l| l["event"] == "deliver").unwrap();
    assert!(delivery.get("kind").is_some());
    let c = run(&config(6, FaultSpec { crash: vec![0], ..Default::default() }), &batches(5)).unwrap();
    assert_ne!(a.trace_jsonl(), c.trace_jsonl());
}

#[test]
fn invalid_membership_is_rejected() {
    let cfg = PbftConfig { n: 5, ..PbftConfig::default() };
    assert!(matches!(run(&cfg, &[]), Err(ConsensusError::InvalidConfig(_))));
    assert_eq!(PbftConfig::default().behavior(0), Behavior::Honest);
}

#[test]
fn cutter_cuts_on_size_and_timeout() {
    let mut h = Harness::new();
    let txs = h.genesis(1, 20);
    let mut cutter = BlockCutter::new(CutterConfig::default());
    let mut cut = Vec::new();
    for tx in txs.iter().take(10) {
        cut.extend(cutter.push(tx.clone(), 0));
    }
    assert_eq!(cut.len(), 1);
    assert_eq!(cut[0].txs.len(), 10);
    assert!(cutter.push(txs[10].clone(), 100).is_empty());
    assert!(cutter.tick(599).is_none());
    let timed = cutter.tick(600).unwrap();
    assert_eq!(timed.txs.len(), 1);
    assert_eq!(timed.id, 1);
    assert!(cutter.flush().is_none());
}

#[test]
fn ordering_service_appends_blocks_in_order() {
    let mut h = Harness::new();
    let txs = h.genesis(1_000_000, 25);
    let mut ledger = Ledger::new();
    let mut service = OrderingService::new(OrderingConfig::default());
    let blocks = service.commit(&mut ledger, txs.clone()).unwrap();
    assert_eq!(blocks.len(), 3);
    assert_eq!(ledger.len(), 3);
    let ordered: Vec<_> = ledger.blocks().iter().flat_map(|b| b.txs.iter().cloned()).collect();
    assert_eq!(ordered, txs);
    assert!(blocks.iter().flat_map(|b| &b.receipts).all(|r| r.applied()));
    assert!(ledger.validate().is_ok());
}
