use super::*;
use crate::audit::AuditKind;
use crate::clock::ManualClock;
use crate::crypto::{b64, ServerKeys};
use proptest::prelude::*;
use std::sync::Barrier;

struct Fixture {
    ledger: Arc<Ledger>,
    clock: ManualClock,
    audit: Arc<AuditLog>,
    store: Store,
}

fn fixture() -> Fixture {
    let clock = ManualClock::default();
    let shared: SharedClock = Arc::new(clock.clone());
    let store = Store::in_memory(shared.clone());
    let audit = Arc::new(AuditLog::in_memory());
    let keys = ServerKeys::generate().unwrap();
    let ledger = Ledger::in_memory(store.clone(), keys.app_key, shared, audit.clone());
    Fixture {
        ledger: Arc::new(ledger),
        clock,
        audit,
        store,
    }
}

fn with_accounts(accts: &[(&str, u64)]) -> Fixture {
    let f = fixture();
    for (u, d) in accts {
        f.ledger.open_account("bank", u, *d).unwrap();
    }
    f
}

fn balance(f: &Fixture, u: &str) -> u64 {
    f.ledger.account(u).unwrap().balance
}

fn states(t: &Transaction) -> Vec<TxnState> {
    t.history.iter().map(|h| h.state).collect()
}

#[test]
fn open_account_rules() {
    let f = fixture();
    assert_eq!(f.ledger.open_account("bank", "alice", 10_000).unwrap().balance, 10_000);
    assert_eq!(
        f.ledger.open_account("bank", "alice", 5),
        Err(LedgerError::AccountExists)
    );
    assert_eq!(f.ledger.open_account("bob", "bob", 0).unwrap().balance, 0);
    assert_eq!(f.ledger.open_account("carol", "carol", 1), Err(LedgerError::Forbidden));
    assert_eq!(f.ledger.open_account("carol", "dave", 0), Err(LedgerError::Forbidden));
    assert_eq!(
        f.ledger.open_account("bank", "x", MAX_AMOUNT + 1),
        Err(LedgerError::BadAmount)
    );
    assert!(matches!(
        f.ledger.open_account("bank", "a/b", 0),
        Err(LedgerError::Validation(_))
    ));
    assert_eq!(
        f.ledger.direct_transfer("bob", "alice", 1),
        Err(LedgerError::InsufficientFunds)
    );
    assert_eq!(f.ledger.account("nobody"), Err(LedgerError::UnknownAccount));
}

#[test]
fn direct_transfer_settles_immediately() {
    let f = with_accounts(&[("alice", 10_000), ("bob", 0)]);
    let t = f.ledger.direct_transfer("alice", "bob", 2500).unwrap();
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (7500, 2500));
    assert_eq!(t.state, TxnState::Settled);
    assert_eq!(t.channel, Channel::Direct);
    assert_eq!(
        states(&t),
        [TxnState::Pending, TxnState::Acknowledged, TxnState::Settled]
    );
    assert_eq!(t.receipt.as_ref().unwrap().txn_id, t.txn_id);
    assert_eq!(t.txn_id.get_version_num(), 4);

    assert_eq!(
        f.ledger.direct_transfer("alice", "bob", 10_001),
        Err(LedgerError::InsufficientFunds)
    );
    assert_eq!(
        f.ledger.direct_transfer("alice", "alice", 1),
        Err(LedgerError::SelfTransfer)
    );
    assert_eq!(
        f.ledger.direct_transfer("alice", "zed", 1),
        Err(LedgerError::UnknownPayee)
    );
    assert_eq!(f.ledger.direct_transfer("alice", "bob", 0), Err(LedgerError::BadAmount));
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (7500, 2500));
}

#[test]
fn history_is_shared_newest_first_and_paginated() {
    let f = with_accounts(&[("alice", 100), ("bob", 100), ("carol", 0)]);
    assert!(f.ledger.history("alice", 0, 50).unwrap().is_empty());
    let t1 = f.ledger.direct_transfer("alice", "bob", 10).unwrap();
    assert_eq!(f.ledger.history("alice", 0, 50).unwrap(), vec![t1.clone()]);
    assert_eq!(f.ledger.history("bob", 0, 50).unwrap(), vec![t1.clone()]);
    assert!(f.ledger.history("carol", 0, 50).unwrap().is_empty());
    let t2 = f.ledger.direct_transfer("bob", "alice", 5).unwrap();
    let t3 = f.ledger.request_payment("carol", "alice", 7).unwrap();
    let ids: Vec<Uuid> = f
        .ledger
        .history("alice", 0, 50)
        .unwrap()
        .iter()
        .map(|t| t.txn_id)
        .collect();
    assert_eq!(ids, [t3.txn_id, t2.txn_id, t1.txn_id]);
    assert_eq!(f.ledger.history("alice", 1, 1).unwrap()[0].txn_id, t2.txn_id);
    assert!(f.ledger.history("alice", 3, 10).unwrap().is_empty());
    assert!(f.ledger.history("alice", 1000, 10).unwrap().is_empty());
    // a username that prefixes another does not leak its history
    f.ledger.open_account("bank", "al", 0).unwrap();
    assert!(f.ledger.history("al", 0, 50).unwrap().is_empty());
}

#[test]
fn racing_transfers_never_overdraw() {
    let f = with_accounts(&[("alice", 500), ("bob", 0)]);
    let n = 1000;
    let barrier = Arc::new(Barrier::new(n));
    let handles: Vec<_> = (0..n)
        .map(|_| {
            let (l, b) = (f.ledger.clone(), barrier.clone());
            std::thread::spawn(move || {
                b.wait();
                l.direct_transfer("alice", "bob", 1)
            })
        })
        .collect();
    let mut ok = 0;
    for h in handles {
        match h.join().unwrap() {
            Ok(_) => ok += 1,
            Err(e) => assert_eq!(e, LedgerError::InsufficientFunds),
        }
    }
    assert_eq!(ok, 500);
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (0, 500));
    f.ledger.verify().unwrap();
}

#[test]
fn tokens_roundtrip_on_every_channel() {
    let f = with_accounts(&[("alice", 0), ("bob", 10_000)]);
    let qr = f.ledger.create_payment_token("alice", TokenKind::Qr, Some(500)).unwrap();
    assert_eq!(qr.presentable, qr.payload);
    assert_eq!(qr.token.state, TokenState::Active);
    assert_eq!(qr.token.expires_at - qr.token.created_at, 15 * 60_000);
    let t = f.ledger.redeem_payment_token("bob", &qr.presentable, None).unwrap();
    assert_eq!(t.state, TxnState::Settled);
    assert_eq!(t.channel, Channel::Qr);
    assert_eq!(t.token_id, Some(qr.token.token_id));
    assert!(t.receipt.is_some());
    assert_eq!(
        states(&t),
        [TxnState::Pending, TxnState::Acknowledged, TxnState::Settled]
    );
    assert_eq!(t.history[1].actor, "alice");
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (500, 9500));
    let tok = f.ledger.token(&qr.token.token_id.to_string()).unwrap();
    assert_eq!(tok.state, TokenState::Redeemed);
    assert_eq!(tok.txn_id, Some(t.txn_id));

    let nfc = f.ledger.create_payment_token("alice", TokenKind::Nfc, Some(1)).unwrap();
    assert_eq!(nfc.presentable, format!("NFC1:{}", nfc.payload));
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &nfc.presentable, None).unwrap().channel,
        Channel::Nfc
    );

    let link = f.ledger.create_payment_token("alice", TokenKind::Link, None).unwrap();
    assert!(link.presentable.starts_with("https://pp2pp.local/pay?t="));
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &link.presentable, None),
        Err(LedgerError::BadAmount)
    );
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &link.presentable, Some(0)),
        Err(LedgerError::BadAmount)
    );
    let t = f.ledger.redeem_payment_token("bob", &link.presentable, Some(42)).unwrap();
    assert_eq!((t.amount, t.channel), (42, Channel::Link));
    assert_eq!(balance(&f, "alice"), 543);
    f.ledger.verify().unwrap();
}

#[test]
fn token_rejections() {
    let f = with_accounts(&[("alice", 0), ("bob", 100), ("carol", 0)]);
    assert_eq!(
        f.ledger.create_payment_token("alice", TokenKind::Qr, Some(0)),
        Err(LedgerError::BadAmount)
    );
    assert_eq!(
        f.ledger.create_payment_token("nobody", TokenKind::Qr, Some(1)),
        Err(LedgerError::UnknownAccount)
    );
    let tok = f.ledger.create_payment_token("alice", TokenKind::Qr, Some(50)).unwrap();
    assert_eq!(
        f.ledger.redeem_payment_token("alice", &tok.payload, None),
        Err(LedgerError::SelfRedeem)
    );
    assert_eq!(
        f.ledger.redeem_payment_token("carol", &tok.payload, None),
        Err(LedgerError::InsufficientFunds)
    );
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &tok.payload, Some(49)),
        Err(LedgerError::BadAmount)
    );
    let raw = b64::decode(&tok.payload).unwrap();
    for i in 0..raw.len() {
        let mut bad = raw.clone();
        bad[i] ^= 0x80;
        assert_eq!(
            f.ledger.redeem_payment_token("bob", &b64::encode(&bad), None),
            Err(LedgerError::RedeemFailure)
        );
    }
    assert_eq!(
        f.ledger.redeem_payment_token("bob", "garbage", None),
        Err(LedgerError::RedeemFailure)
    );
    f.ledger.redeem_payment_token("bob", &tok.payload, Some(50)).unwrap();
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &tok.payload, None),
        Err(LedgerError::TokenSpent)
    );

    let tok = f.ledger.create_payment_token("alice", TokenKind::Qr, Some(1)).unwrap();
    let id = tok.token.token_id.to_string();
    assert_eq!(f.ledger.revoke_token("bob", &id), Err(LedgerError::NotParty));
    assert_eq!(f.ledger.revoke_token("alice", &id).unwrap().state, TokenState::Revoked);
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &tok.payload, None),
        Err(LedgerError::TokenRevoked)
    );

    let tok = f.ledger.create_payment_token("alice", TokenKind::Qr, Some(1)).unwrap();
    f.clock.advance_ms(15 * 60_000);
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &tok.payload, None),
        Err(LedgerError::TokenExpired)
    );
    assert_eq!(
        f.ledger.token(&tok.token.token_id.to_string()).unwrap().state,
        TokenState::Expired
    );
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &tok.payload, None),
        Err(LedgerError::TokenExpired)
    );
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (50, 50));
    f.ledger.verify().unwrap();
}

/// A token that is merely encoded, as opposed to sealed, can be rewritten
/// by whoever holds it. The same edit on a sealed token is rejected.
#[test]
fn unsealed_tokens_would_be_forgeable() {
    #[derive(Serialize, Deserialize)]
    struct Plain {
        payee: String,
        amount: u64,
    }
    let honest = b64::encode(serde_json::to_vec(&Plain { payee: "alice".into(), amount: 5 }).unwrap());
    let mut claims: Plain = serde_json::from_slice(&b64::decode(&honest).unwrap()).unwrap();
    claims.payee = "mallory".into();
    claims.amount = 5000;
    let forged = b64::encode(serde_json::to_vec(&claims).unwrap());
    let accepted: Plain = serde_json::from_slice(&b64::decode(&forged).unwrap()).unwrap();
    assert_eq!((accepted.payee.as_str(), accepted.amount), ("mallory", 5000));

    let f = with_accounts(&[("alice", 0), ("bob", 10_000), ("mallory", 0)]);
    let tok = f.ledger.create_payment_token("alice", TokenKind::Qr, Some(5)).unwrap();
    let other_key = ServerKeys::generate().unwrap().app_key;
    let fake = TokenClaims {
        t: tok.token.token_id,
        k: TokenKind::Qr,
        p: "mallory".into(),
        a: Some(5000),
        x: tok.token.expires_at,
    };
    let resealed = crypto::seal(&other_key, &serde_json::to_vec(&fake).unwrap(), TOKEN_AD)
        .unwrap()
        .to_b64();
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &resealed, None),
        Err(LedgerError::RedeemFailure)
    );
    assert_eq!(
        f.ledger.redeem_payment_token("bob", &forged, None),
        Err(LedgerError::RedeemFailure)
    );
    assert_eq!(balance(&f, "mallory"), 0);
}

#[test]
fn double_redeem_race_has_one_winner() {
    for _ in 0..10 {
        let f = with_accounts(&[("alice", 0)]);
        let redeemers = 64;
        for i in 0..redeemers {
            f.ledger.open_account("bank", &format!("p{i}"), 1000).unwrap();
        }
        let tok = f.ledger.create_payment_token("alice", TokenKind::Nfc, Some(300)).unwrap();
        let barrier = Arc::new(Barrier::new(redeemers));
        let handles: Vec<_> = (0..redeemers)
            .map(|i| {
                let (l, b, p) = (f.ledger.clone(), barrier.clone(), tok.presentable.clone());
                std::thread::spawn(move || {
                    b.wait();
                    l.redeem_payment_token(&format!("p{i}"), &p, None)
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results
            .iter()
            .filter_map(|r| r.as_ref().err())
            .all(|e| *e == LedgerError::TokenSpent));
        assert_eq!(balance(&f, "alice"), 300);
        f.ledger.verify().unwrap();
    }
}

#[test]
fn request_and_acknowledge() {
    let f = with_accounts(&[("alice", 0), ("bob", 1000), ("carol", 0)]);
    let r = f.ledger.request_payment("alice", "bob", 300).unwrap();
    assert_eq!((r.state, r.channel), (TxnState::Pending, Channel::Request));
    assert_eq!(balance(&f, "bob"), 1000);
    let id = r.txn_id.to_string();
    assert_eq!(f.ledger.acknowledge("alice", &id, true), Err(LedgerError::NotYourTxn));
    assert_eq!(f.ledger.acknowledge("bob", "nope", true), Err(LedgerError::UnknownTxn));
    let t = f.ledger.acknowledge("bob", &id, true).unwrap();
    assert_eq!(t.state, TxnState::Settled);
    assert!(t.receipt.is_some());
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (300, 700));
    assert_eq!(f.ledger.acknowledge("bob", &id, true), Err(LedgerError::AlreadyConcluded));
    assert_eq!(f.ledger.acknowledge("bob", &id, false), Err(LedgerError::AlreadyConcluded));

    let r = f.ledger.request_payment("alice", "bob", 300).unwrap();
    let t = f.ledger.acknowledge("bob", &r.txn_id.to_string(), false).unwrap();
    assert_eq!(states(&t), [TxnState::Pending, TxnState::Rejected]);
    assert!(t.receipt.is_none());
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (300, 700));

    // acceptance without funds leaves the request pending
    let r = f.ledger.request_payment("alice", "carol", 5).unwrap();
    let id = r.txn_id.to_string();
    assert_eq!(f.ledger.acknowledge("carol", &id, true), Err(LedgerError::InsufficientFunds));
    assert_eq!(f.ledger.transaction(&id).unwrap().state, TxnState::Pending);
    assert_eq!(f.ledger.acknowledge("carol", &id, false).unwrap().state, TxnState::Rejected);

    assert_eq!(
        f.ledger.request_payment("alice", "zed", 1),
        Err(LedgerError::UnknownAccount)
    );
    assert_eq!(
        f.ledger.request_payment("alice", "alice", 1),
        Err(LedgerError::SelfTransfer)
    );
    f.ledger.verify().unwrap();
}

#[test]
fn disputes() {
    let f = with_accounts(&[("alice", 1000), ("bob", 0), ("carol", 0)]);
    let t = f.ledger.direct_transfer("alice", "bob", 500).unwrap();
    let id = t.txn_id.to_string();
    assert_eq!(f.ledger.open_dispute("carol", &id, "x"), Err(LedgerError::NotParty));
    assert!(matches!(
        f.ledger.open_dispute("alice", &id, &"x".repeat(501)),
        Err(LedgerError::Validation(_))
    ));
    assert_eq!(
        f.ledger.resolve_dispute("bank", &id, DisputeOutcome::Reverse),
        Err(LedgerError::NotDisputed)
    );
    let d = f.ledger.open_dispute("alice", &id, "not received").unwrap();
    assert_eq!(d.state, TxnState::Disputed);
    assert_eq!(d.dispute.as_ref().unwrap().reason, "not received");
    assert_eq!(f.ledger.open_dispute("bob", &id, "again"), Err(LedgerError::NotSettled));
    assert_eq!(
        f.ledger.resolve_dispute("alice", &id, DisputeOutcome::Reverse),
        Err(LedgerError::Forbidden)
    );
    let r = f.ledger.resolve_dispute("bank", &id, DisputeOutcome::Reverse).unwrap();
    assert_eq!(r.state, TxnState::Resolved);
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (1000, 0));
    assert_eq!(
        states(&r),
        [
            TxnState::Pending,
            TxnState::Acknowledged,
            TxnState::Settled,
            TxnState::Disputed,
            TxnState::Resolved
        ]
    );

    let t = f.ledger.direct_transfer("alice", "bob", 200).unwrap();
    let id = t.txn_id.to_string();
    f.ledger.open_dispute("bob", &id, "wrong amount").unwrap();
    let r = f.ledger.resolve_dispute("bank", &id, DisputeOutcome::Uphold).unwrap();
    assert_eq!(r.dispute.unwrap().outcome, Some(DisputeOutcome::Uphold));
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (800, 200));

    let pending = f.ledger.request_payment("bob", "alice", 1).unwrap();
    assert_eq!(
        f.ledger.open_dispute("alice", &pending.txn_id.to_string(), "x"),
        Err(LedgerError::NotSettled)
    );
    f.ledger.verify().unwrap();
}

/// Spend the proceeds, then dispute. The reversal is refused, the dispute
/// stays open, and replaying the event log agrees with the balances.
#[test]
fn reversal_blocked_after_payee_spends() {
    let f = with_accounts(&[("alice", 500), ("bob", 0), ("carol", 0)]);
    let t = f.ledger.direct_transfer("alice", "bob", 500).unwrap();
    f.ledger.direct_transfer("bob", "carol", 400).unwrap();
    let id = t.txn_id.to_string();
    f.ledger.open_dispute("alice", &id, "fraud").unwrap();
    assert_eq!(
        f.ledger.resolve_dispute("bank", &id, DisputeOutcome::Reverse),
        Err(LedgerError::ReversalInsufficientFunds)
    );
    assert_eq!(f.ledger.transaction(&id).unwrap().state, TxnState::Disputed);

    let r = replay(&f.ledger.events().unwrap()).unwrap();
    let expect: BTreeMap<String, u64> =
        [("alice", 0), ("bob", 100), ("carol", 400)].map(|(u, b)| (u.to_owned(), b)).into();
    assert_eq!(r.balances, expect);
    assert_eq!(r.states[&t.txn_id], TxnState::Disputed);

    // once bob is funded again the reversal goes through
    f.ledger.direct_transfer("carol", "bob", 400).unwrap();
    f.ledger.resolve_dispute("bank", &id, DisputeOutcome::Reverse).unwrap();
    assert_eq!((balance(&f, "alice"), balance(&f, "bob")), (500, 0));
    f.ledger.verify().unwrap();
}

#[test]
fn replay_rejects_illegal_histories() {
    let open = |seq, u: &str, d| LedgerEvent {
        seq,
        ts: 0,
        entry: LedgerEntry::Open {
            username: u.into(),
            deposit: d,
        },
    };
    let step = |seq, state, amount| LedgerEvent {
        seq,
        ts: 0,
        entry: LedgerEntry::Transition {
            txn_id: Uuid::nil(),
            state,
            actor: "a".into(),
            payer: "a".into(),
            payee: "b".into(),
            amount,
            channel: Channel::Direct,
            outcome: None,
        },
    };
    use TxnState::*;
    let good = vec![
        open(0, "a", 10),
        open(1, "b", 0),
        step(2, Pending, 10),
        step(3, Acknowledged, 10),
        step(4, Settled, 10),
    ];
    let r = replay(&good).unwrap();
    assert_eq!((r.balances["a"], r.balances["b"], r.minted), (0, 10, 10));

    let cases: Vec<(&str, Vec<LedgerEvent>)> = vec![
        ("gap", vec![open(0, "a", 1), open(2, "b", 1)]),
        ("reopen", vec![open(0, "a", 1), open(1, "a", 1)]),
        ("skip ack", vec![open(0, "a", 10), open(1, "b", 0), step(2, Pending, 1), step(3, Settled, 1)]),
        ("starts settled", vec![open(0, "a", 10), open(1, "b", 0), step(2, Settled, 1)]),
        (
            "overdraft",
            vec![open(0, "a", 1), open(1, "b", 0), step(2, Pending, 2), step(3, Acknowledged, 2), step(4, Settled, 2)],
        ),
        (
            "amount changed",
            vec![open(0, "a", 10), open(1, "b", 0), step(2, Pending, 1), step(3, Acknowledged, 2)],
        ),
        (
            "rejected then settled",
            vec![open(0, "a", 10), open(1, "b", 0), step(2, Pending, 1), step(3, Rejected, 1), step(4, Settled, 1)],
        ),
    ];
    for (what, evs) in cases {
        assert!(matches!(replay(&evs), Err(LedgerError::Inconsistent(_))), "{what}");
    }
}

#[test]
fn audit_has_one_line_per_transition() {
    let f = with_accounts(&[("alice", 1000), ("bob", 0)]);
    let t = f.ledger.direct_transfer("alice", "bob", 5).unwrap();
    let r = f.ledger.request_payment("bob", "alice", 5).unwrap();
    f.ledger.acknowledge("alice", &r.txn_id.to_string(), false).unwrap();
    f.ledger.open_dispute("bob", &t.txn_id.to_string(), "?").unwrap();
    let _ = f.ledger.direct_transfer("bob", "alice", 1_000_000);
    let lines: Vec<_> = f
        .audit
        .events()
        .into_iter()
        .filter(|e| e.kind == AuditKind::Txn && e.txn_id.is_some())
        .collect();
    let history_len: usize = f
        .store
        .records
        .scan_prefix::<Transaction>(Table::Transactions, "")
        .unwrap()
        .iter()
        .map(|(_, t)| t.history.len())
        .sum();
    assert_eq!(lines.len(), history_len);
    assert_eq!(lines.len(), 3 + 2 + 1);
    assert_eq!(f.ledger.verify().unwrap().transitions, 6);
}

#[test]
fn ledger_log_matches_store_and_repairs_missing_tail() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::default();
    let shared: SharedClock = Arc::new(clock.clone());
    let keys = ServerKeys::generate().unwrap();
    let open = || {
        let store = Store::open(dir.path(), shared.clone()).unwrap();
        let ledger = Ledger::open(
            store.clone(),
            keys.app_key.clone(),
            shared.clone(),
            Arc::new(AuditLog::in_memory()),
            LedgerConfig::default(),
            Some(dir.path()),
        )
        .unwrap();
        (store, ledger)
    };
    {
        let (_, l) = open();
        l.open_account("bank", "alice", 100).unwrap();
        l.open_account("bank", "bob", 0).unwrap();
        for _ in 0..10 {
            l.direct_transfer("alice", "bob", 3).unwrap();
        }
    }
    let path = dir.path().join(LEDGER_FILE);
    let logged = read_log(&path).unwrap();
    assert_eq!(logged.len(), 2 + 30);
    let r = replay(&logged).unwrap();
    assert_eq!((r.balances["alice"], r.balances["bob"]), (70, 30));

    // lose the last few lines plus a torn fragment, as a crash would
    let text = std::fs::read_to_string(&path).unwrap();
    let keep: Vec<&str> = text.lines().take(20).collect();
    std::fs::write(&path, format!("{}\n{{\"seq\":20,\"ts", keep.join("\n"))).unwrap();
    assert_eq!(read_log(&path).unwrap().len(), 20);

    let (store, l) = open();
    assert_eq!(read_log(&path).unwrap(), logged);
    l.direct_transfer("bob", "alice", 30).unwrap();
    let r = replay(&read_log(&path).unwrap()).unwrap();
    assert_eq!((r.balances["alice"], r.balances["bob"]), (100, 0));
    check_against_store(&r, &store).unwrap();

    // a log that contradicts the store is refused
    drop(l);
    let mut evs = read_log(&path).unwrap();
    if let LedgerEntry::Open { deposit, .. } = &mut evs[0].entry {
        *deposit = 1_000_000;
    }
    let text: String = evs
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    std::fs::write(&path, text).unwrap();
    let store = Store::open(dir.path(), shared.clone()).unwrap();
    assert!(matches!(
        Ledger::open(
            store,
            keys.app_key.clone(),
            shared.clone(),
            Arc::new(AuditLog::in_memory()),
            LedgerConfig::default(),
            Some(dir.path())
        ),
        Err(LedgerError::Inconsistent(_))
    ));
}

#[test]
fn presentable_forms_parse() {
    assert_eq!(payload_from_presentable("abc"), "abc");
    assert_eq!(payload_from_presentable(" NFC1:abc\n"), "abc");
    assert_eq!(payload_from_presentable("https://h/pay?t=abc&x=1"), "abc");
}

#[derive(Debug, Clone)]
enum Op {
    Direct(usize, usize, u64),
    Token(usize, usize, Option<u64>, u64),
    Request(usize, usize, u64, bool),
    Dispute(usize, bool),
    Expire,
}

fn op() -> impl Strategy<Value = Op> {
    let u = 0usize..4;
    let amt = 1u64..400;
    prop_oneof![
        4 => (u.clone(), u.clone(), amt.clone()).prop_map(|(a, b, n)| Op::Direct(a, b, n)),
        3 => (u.clone(), u.clone(), proptest::option::of(amt.clone()), amt.clone())
            .prop_map(|(a, b, n, m)| Op::Token(a, b, n, m)),
        3 => (u.clone(), u.clone(), amt, any::<bool>()).prop_map(|(a, b, n, y)| Op::Request(a, b, n, y)),
        2 => (0usize..64, any::<bool>()).prop_map(|(i, r)| Op::Dispute(i, r)),
        1 => Just(Op::Expire),
    ]
}

const USERS: [&str; 4] = ["u0", "u1", "u2", "u3"];

/// Apply `ops` to a ledger and to a plain balance model side by side; the
/// two must agree after every step, and the total never changes.
fn run_model(ops: &[Op]) -> Result<(), TestCaseError> {
    let deposits = [1000u64, 500, 0, 250];
    let f = fixture();
    let mut model: BTreeMap<&str, u64> = BTreeMap::new();
    for (u, d) in USERS.iter().zip(deposits) {
        f.ledger.open_account("bank", u, d).unwrap();
        model.insert(u, d);
    }
    let minted: u64 = deposits.iter().sum();
    let mut settled: Vec<(Uuid, &str, &str, u64)> = Vec::new();
    let pay = |m: &mut BTreeMap<&str, u64>, a: &'static str, b: &'static str, n: u64| -> bool {
        if a == b || m[a] < n {
            return false;
        }
        *m.get_mut(a).unwrap() -= n;
        *m.get_mut(b).unwrap() += n;
        true
    };
    for op in ops {
        match *op {
            Op::Direct(a, b, n) => {
                let (a, b) = (USERS[a], USERS[b]);
                let r = f.ledger.direct_transfer(a, b, n);
                let ok = pay(&mut model, a, b, n);
                prop_assert_eq!(r.is_ok(), ok, "{:?}", r);
                if let Ok(t) = r {
                    settled.push((t.txn_id, a, b, n));
                }
            }
            Op::Token(payee, payer, fixed, open) => {
                let (payee, payer) = (USERS[payee], USERS[payer]);
                let tok = f.ledger.create_payment_token(payee, TokenKind::Qr, fixed).unwrap();
                let supplied = if fixed.is_some() { None } else { Some(open) };
                let n = fixed.unwrap_or(open);
                let r = f.ledger.redeem_payment_token(payer, &tok.payload, supplied);
                let ok = pay(&mut model, payer, payee, n);
                prop_assert_eq!(r.is_ok(), ok, "{:?}", r);
                if let Ok(t) = r {
                    settled.push((t.txn_id, payer, payee, n));
                    prop_assert_eq!(
                        f.ledger.redeem_payment_token(payer, &tok.payload, supplied),
                        Err(LedgerError::TokenSpent)
                    );
                }
            }
            Op::Request(payee, payer, n, accept) => {
                let (payee, payer) = (USERS[payee], USERS[payer]);
                let r = f.ledger.request_payment(payee, payer, n);
                if payee == payer {
                    prop_assert_eq!(r, Err(LedgerError::SelfTransfer));
                    continue;
                }
                let id = r.unwrap().txn_id;
                let r = f.ledger.acknowledge(payer, &id.to_string(), accept);
                if accept {
                    let ok = pay(&mut model, payer, payee, n);
                    prop_assert_eq!(r.is_ok(), ok, "{:?}", r);
                    if ok {
                        settled.push((id, payer, payee, n));
                    }
                } else {
                    prop_assert_eq!(r.unwrap().state, TxnState::Rejected);
                }
            }
            Op::Dispute(i, reverse) => {
                if settled.is_empty() {
                    continue;
                }
                let (id, payer, payee, n) = settled.remove(i % settled.len());
                let id = id.to_string();
                f.ledger.open_dispute(payer, &id, "model").unwrap();
                let outcome = if reverse {
                    DisputeOutcome::Reverse
                } else {
                    DisputeOutcome::Uphold
                };
                let r = f.ledger.resolve_dispute("bank", &id, outcome);
                if reverse {
                    let ok = pay(&mut model, payee, payer, n);
                    let expect = if ok {
                        Ok(TxnState::Resolved)
                    } else {
                        Err(LedgerError::ReversalInsufficientFunds)
                    };
                    prop_assert_eq!(r.map(|t| t.state), expect);
                } else {
                    prop_assert_eq!(r.unwrap().state, TxnState::Resolved);
                }
            }
            Op::Expire => f.clock.advance_ms(DEFAULT_TOKEN_TTL_MS),
        }
        let total: u64 = f.ledger.accounts().unwrap().iter().map(|a| a.balance).sum();
        prop_assert_eq!(total, minted);
    }
    for u in USERS {
        prop_assert_eq!(balance(&f, u), model[u]);
    }
    let r = f.ledger.verify().map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(r.minted, minted as u128);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ledger_agrees_with_balance_model(ops in proptest::collection::vec(op(), 1..250)) {
        run_model(&ops)?;
    }
}
