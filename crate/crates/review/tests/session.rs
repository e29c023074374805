use std::sync::Arc;
use std::time::Duration;

use lnlab_core::dedup::{auto_decisions, pair_id, read_decisions, write_jsonl, SimilarityPair, Verdict};
use lnlab_core::Error;
use lnlab_review::{ManualClock, PairStatus, Progress, ReviewSession, LEASE};

fn pairs(n: usize) -> Vec<SimilarityPair> {
    (0..n)
        .map(|i| SimilarityPair {
            pair_id: pair_id("t0", &format!("x{i}")),
            test_id: "t0".into(),
            train_id: format!("x{i}"),
            l2_distance: i as f64,
            ssim: if i == 0 { 1.0 } else { 0.5 },
            rank_l2: Some(i + 1),
            rank_ssim: None,
        })
        .collect()
}

fn open(n: usize, dir: &tempfile::TempDir, clock: &Arc<ManualClock>) -> ReviewSession {
    ReviewSession::open(pairs(n), &dir.path().join("decisions.jsonl"), clock.clone()).unwrap()
}

#[test]
fn fresh_session_counts_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::starting_at(1_000));
    let s = open(10, &dir, &clock);
    assert_eq!(s.progress(), Progress { total: 10, decided: 0, pending: 10, leased: 0 });
    let first = s.next_pair("ann").unwrap();
    assert_eq!(first.pair_id, "t0|x0");
    assert_eq!(s.next_pair("bob").unwrap().pair_id, "t0|x1");
    assert_eq!(s.progress().leased, 2);
}

#[test]
fn decisions_append_one_line_each() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::starting_at(0));
    let s = open(10, &dir, &clock);
    for i in 0..4 {
        let p = s.next_pair("ann").unwrap();
        s.record_decision(&p.pair_id, if i % 2 == 0 { Verdict::Similar } else { Verdict::Distinct }, "ann")
            .unwrap();
        let lines = std::fs::read_to_string(s.log_path()).unwrap().lines().count();
        assert_eq!(lines, i + 1);
    }
    assert_eq!(s.progress().decided, 4);
    assert!(matches!(s.record_decision("nope", Verdict::Similar, "ann"), Err(Error::UnknownPair(_))));
    assert_eq!(std::fs::read_to_string(s.log_path()).unwrap().lines().count(), 4);
}

#[test]
fn all_decided_yields_none() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::starting_at(0));
    let s = open(3, &dir, &clock);
    while let Some(p) = s.next_pair("ann") {
        s.record_decision(&p.pair_id, Verdict::Distinct, "ann").unwrap();
    }
    assert_eq!(s.progress(), Progress { total: 3, decided: 3, pending: 0, leased: 0 });
    assert!(s.next_pair("bob").is_none());
}

#[test]
fn expired_lease_returns_pair_to_pool() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::starting_at(0));
    let s = open(2, &dir, &clock);
    let a = s.next_pair("ann").unwrap();
    let b = s.next_pair("bob").unwrap();
    assert_ne!(a.pair_id, b.pair_id);
    assert!(s.next_pair("cat").is_none(), "both pairs are leased");

    clock.advance(LEASE - Duration::from_secs(1));
    assert!(s.next_pair("cat").is_none());
    clock.advance(Duration::from_secs(1));
    assert_eq!(s.progress().pending, 2);
    let c = s.next_pair("cat").unwrap();
    assert_eq!(c.pair_id, a.pair_id);
    assert!(matches!(s.status(&c.pair_id), Some(PairStatus::Assigned { reviewer, .. }) if reviewer == "cat"));
}

#[test]
fn reviewer_gets_their_own_lease_back() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::starting_at(0));
    let s = open(3, &dir, &clock);
    let first = s.next_pair("ann").unwrap();
    assert_eq!(s.next_pair("ann").unwrap(), first);
    assert_eq!(s.progress().leased, 1);
}

#[test]
fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::starting_at(5));
    {
        let s = open(5, &dir, &clock);
        for _ in 0..3 {
            let p = s.next_pair("ann").unwrap();
            s.record_decision(&p.pair_id, Verdict::Similar, "ann").unwrap();
        }
        s.next_pair("ann").unwrap();
    }
    let s = open(5, &dir, &clock);
    assert_eq!(s.progress(), Progress { total: 5, decided: 3, pending: 2, leased: 0 });
    assert_eq!(s.next_pair("bob").unwrap().pair_id, "t0|x3");

    std::fs::remove_file(dir.path().join("decisions.jsonl")).unwrap();
    let s = open(5, &dir, &clock);
    assert_eq!(s.progress().decided, 0);
}

#[test]
fn auto_flagged_decisions_count_as_decided() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decisions.jsonl");
    let ps = pairs(10);
    let auto = auto_decisions(&ps, 0);
    assert_eq!(auto.len(), 1);
    write_jsonl(std::fs::File::create(&path).unwrap(), &auto).unwrap();
    let s = ReviewSession::open(ps, &path, Arc::new(ManualClock::starting_at(0))).unwrap();
    assert_eq!(s.progress().decided, 1);
    let logged = read_decisions(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(logged.len(), 1);
}

#[test]
fn unknown_pair_in_log_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decisions.jsonl");
    std::fs::write(&path, "{\"pair_id\":\"zz\",\"verdict\":\"similar\",\"reviewer\":\"a\",\"timestamp\":1}\n").unwrap();
    let err = ReviewSession::open(pairs(2), &path, Arc::new(ManualClock::starting_at(0)));
    assert!(matches!(err, Err(Error::UnknownPair(_))));
}
