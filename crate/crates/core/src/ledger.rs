//! Accounts, payment tokens and the transaction state machine.
//!
//! Every ledger operation runs as one record-store batch: balances, the
//! transaction record, the per-user history index and the ledger events
//! commit together or not at all. The committed events are then appended to
//! `ledger.jsonl` (fsync'd), which [`replay`] can rebuild balances from.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::audit::{AuditEvent, AuditLog};
use crate::clock::{Millis, SharedClock};
use crate::crypto::{self, AppKey, CryptoError, SealedBlob};
use crate::store::{Store, StoreError, Table, Tx};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const DEFAULT_TOKEN_TTL_MS: u64 = 15 * 60_000;
/// Largest single deposit or payment, in minor units.
pub const MAX_AMOUNT: u64 = 1_000_000_000_000_000;
pub const MAX_REASON_LEN: usize = 500;
pub const NFC_PREFIX: &str = "NFC1:";
const TOKEN_AD: &[u8] = b"payment-token";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("account already exists")]
    AccountExists,
    #[error("no such account")]
    UnknownAccount,
    #[error("no such payee")]
    UnknownPayee,
    #[error("insufficient funds")]
    InsufficientFunds,
    #[error("cannot pay yourself")]
    SelfTransfer,
    #[error("amount must be between 1 and {MAX_AMOUNT}")]
    BadAmount,
    #[error("token could not be opened")]
    RedeemFailure,
    #[error("token already redeemed")]
    TokenSpent,
    #[error("token expired")]
    TokenExpired,
    #[error("token revoked")]
    TokenRevoked,
    #[error("cannot redeem your own token")]
    SelfRedeem,
    #[error("no such transaction")]
    UnknownTxn,
    #[error("transaction belongs to another payer")]
    NotYourTxn,
    #[error("transaction already concluded")]
    AlreadyConcluded,
    #[error("not a party to this transaction")]
    NotParty,
    #[error("transaction is not settled")]
    NotSettled,
    #[error("transaction is not disputed")]
    NotDisputed,
    #[error("payee balance too low to reverse; dispute stays open")]
    ReversalInsufficientFunds,
    #[error("bank role required")]
    Forbidden,
    #[error("illegal transition {0:?} -> {1:?}")]
    IllegalTransition(TxnState, TxnState),
    #[error("validation: {0}")]
    Validation(String),
    #[error("ledger inconsistent: {0}")]
    Inconsistent(String),
    #[error("storage: {0}")]
    Store(StoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl From<StoreError> for LedgerError {
    fn from(e: StoreError) -> Self {
        LedgerError::Store(e)
    }
}

impl LedgerError {
    pub fn code(&self) -> &'static str {
        match self {
            LedgerError::AccountExists => "account_exists",
            LedgerError::UnknownAccount => "unknown_account",
            LedgerError::UnknownPayee => "unknown_payee",
            LedgerError::InsufficientFunds => "insufficient_funds",
            LedgerError::SelfTransfer => "self_transfer",
            LedgerError::BadAmount => "bad_amount",
            LedgerError::RedeemFailure => "redeem_failure",
            LedgerError::TokenSpent => "token_spent",
            LedgerError::TokenExpired => "token_expired",
            LedgerError::TokenRevoked => "token_revoked",
            LedgerError::SelfRedeem => "self_redeem",
            LedgerError::UnknownTxn => "unknown_txn",
            LedgerError::NotYourTxn => "not_your_txn",
            LedgerError::AlreadyConcluded => "already_concluded",
            LedgerError::NotParty => "not_party",
            LedgerError::NotSettled => "not_settled",
            LedgerError::NotDisputed => "not_disputed",
            LedgerError::ReversalInsufficientFunds => "reversal_insufficient_funds",
            LedgerError::Forbidden => "forbidden",
            LedgerError::IllegalTransition(..) => "illegal_transition",
            LedgerError::Validation(_) => "validation",
            LedgerError::Inconsistent(_) => "ledger_inconsistent",
            LedgerError::Store(_) => "storage",
            LedgerError::Crypto(_) => "crypto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub username: String,
    pub balance: u64,
    pub created_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Qr,
    Nfc,
    Link,
}

impl TokenKind {
    pub fn channel(self) -> Channel {
        match self {
            TokenKind::Qr => Channel::Qr,
            TokenKind::Nfc => Channel::Nfc,
            TokenKind::Link => Channel::Link,
        }
    }
}

impl std::str::FromStr for TokenKind {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qr" => Ok(TokenKind::Qr),
            "nfc" => Ok(TokenKind::Nfc),
            "link" => Ok(TokenKind::Link),
            _ => Err(LedgerError::Validation(format!("unknown token kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenState {
    Active,
    Redeemed,
    Expired,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentToken {
    pub token_id: Uuid,
    pub kind: TokenKind,
    pub payee: String,
    /// `None` for open-amount tokens.
    pub amount: Option<u64>,
    pub state: TokenState,
    pub created_at: Millis,
    pub expires_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn_id: Option<Uuid>,
}

/// A freshly minted token with its sealed payload and channel rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedToken {
    pub token: PaymentToken,
    pub payload: String,
    pub presentable: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenClaims {
    t: Uuid,
    k: TokenKind,
    p: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<u64>,
    x: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Channel {
    Qr,
    Nfc,
    Link,
    Direct,
    Request,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxnState {
    Pending,
    Acknowledged,
    Settled,
    Rejected,
    Disputed,
    Resolved,
}

impl TxnState {
    pub fn can_move_to(self, next: TxnState) -> bool {
        use TxnState::*;
        matches!(
            (self, next),
            (Pending, Acknowledged)
                | (Pending, Rejected)
                | (Acknowledged, Settled)
                | (Settled, Disputed)
                | (Disputed, Resolved)
        )
    }
}

/// `true` if `states` starts at Pending and follows only legal moves.
pub fn is_legal_path(states: &[TxnState]) -> bool {
    states.first() == Some(&TxnState::Pending) && states.windows(2).all(|w| w[0].can_move_to(w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisputeOutcome {
    Uphold,
    Reverse,
}

impl std::str::FromStr for DisputeOutcome {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uphold" => Ok(DisputeOutcome::Uphold),
            "reverse" => Ok(DisputeOutcome::Reverse),
            _ => Err(LedgerError::Validation(format!("unknown outcome {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub state: TxnState,
    pub ts: Millis,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub txn_id: Uuid,
    pub acknowledged_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispute {
    pub opened_by: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<DisputeOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub txn_id: Uuid,
    pub payer: String,
    pub payee: String,
    pub amount: u64,
    pub channel: Channel,
    pub state: TxnState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receipt: Option<Receipt>,
    pub created_at: Millis,
    pub history: Vec<HistoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<Uuid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispute: Option<Dispute>,
}

/// One line of `ledger.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub ts: Millis,
    #[serde(flatten)]
    pub entry: LedgerEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEntry {
    Open {
        username: String,
        deposit: u64,
    },
    Transition {
        txn_id: Uuid,
        state: TxnState,
        actor: String,
        payer: String,
        payee: String,
        amount: u64,
        channel: Channel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outcome: Option<DisputeOutcome>,
    },
}

/// Balances and counts rebuilt from an event sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Replay {
    pub balances: BTreeMap<String, u64>,
    pub states: BTreeMap<Uuid, TxnState>,
    pub minted: u128,
    pub events: u64,
    pub transitions: u64,
}

impl Replay {
    pub fn total(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum()
    }
}

/// Rebuild balances from `events`, checking sequence numbering, legal
/// transitions, and that no balance ever goes negative.
pub fn replay<'a>(events: impl IntoIterator<Item = &'a LedgerEvent>) -> Result<Replay, LedgerError> {
    struct Seen {
        state: TxnState,
        parties: (String, String, u64),
    }
    let bad = |seq: u64, msg: String| LedgerError::Inconsistent(format!("event {seq}: {msg}"));
    let mut r = Replay::default();
    let mut txns: HashMap<Uuid, Seen> = HashMap::new();
    for ev in events {
        if ev.seq != r.events {
            return Err(bad(ev.seq, format!("expected sequence number {}", r.events)));
        }
        r.events += 1;
        match &ev.entry {
            LedgerEntry::Open { username, deposit } => {
                if r.balances.insert(username.clone(), *deposit).is_some() {
                    return Err(bad(ev.seq, format!("account {username} opened twice")));
                }
                r.minted += *deposit as u128;
            }
            LedgerEntry::Transition {
                txn_id,
                state,
                payer,
                payee,
                amount,
                outcome,
                ..
            } => {
                r.transitions += 1;
                let parties = (payer.clone(), payee.clone(), *amount);
                match txns.get_mut(txn_id) {
                    None if *state == TxnState::Pending => {
                        txns.insert(*txn_id, Seen { state: *state, parties });
                    }
                    None => return Err(bad(ev.seq, format!("{txn_id} starts at {state:?}"))),
                    Some(seen) => {
                        if seen.parties != parties {
                            return Err(bad(ev.seq, format!("{txn_id} changed parties")));
                        }
                        if !seen.state.can_move_to(*state) {
                            return Err(bad(
                                ev.seq,
                                format!("{txn_id} moved {:?} -> {state:?}", seen.state),
                            ));
                        }
                        seen.state = *state;
                    }
                }
                r.states.insert(*txn_id, *state);
                let movement = match (state, outcome) {
                    (TxnState::Settled, _) => Some((payer, payee)),
                    (TxnState::Resolved, Some(DisputeOutcome::Reverse)) => Some((payee, payer)),
                    _ => None,
                };
                if let Some((from, to)) = movement {
                    let src = r
                        .balances
                        .get_mut(from)
                        .ok_or_else(|| bad(ev.seq, format!("no account {from}")))?;
                    *src = src
                        .checked_sub(*amount)
                        .ok_or_else(|| bad(ev.seq, format!("{from} overdrawn")))?;
                    let dst = r
                        .balances
                        .get_mut(to)
                        .ok_or_else(|| bad(ev.seq, format!("no account {to}")))?;
                    *dst = dst
                        .checked_add(*amount)
                        .ok_or_else(|| bad(ev.seq, format!("{to} overflowed")))?;
                }
            }
        }
    }
    Ok(r)
}

/// Parse a ledger log. An unterminated final line (torn write) is ignored.
pub fn read_log(path: &Path) -> Result<Vec<LedgerEvent>, LedgerError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::from(e).into()),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| LedgerError::Inconsistent(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Extract the sealed payload from any presentable form (bare payload,
/// `NFC1:` tag, or a link with a `t=` parameter).
pub fn payload_from_presentable(presentable: &str) -> &str {
    let s = presentable.trim();
    if let Some(rest) = s.strip_prefix(NFC_PREFIX) {
        return rest;
    }
    match s.split_once("t=") {
        Some((_, p)) => p.split('&').next().unwrap_or(p),
        None => s,
    }
}

#[derive(Debug, Clone)]
pub struct LedgerConfig {
    pub bank_users: BTreeSet<String>,
    pub token_ttl_ms: u64,
    /// Prefix for LINK tokens.
    pub base_url: String,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            bank_users: BTreeSet::from(["bank".to_owned()]),
            token_ttl_ms: DEFAULT_TOKEN_TTL_MS,
            base_url: format!("https://{}", crate::rp::DEFAULT_RP_ID),
        }
    }
}

struct LogState {
    file: Option<File>,
    next_seq: u64,
}

struct Events {
    next: u64,
    ts: Millis,
    list: Vec<LedgerEvent>,
}

impl Events {
    fn push(&mut self, entry: LedgerEntry) {
        self.list.push(LedgerEvent {
            seq: self.next,
            ts: self.ts,
            entry,
        });
        self.next += 1;
    }
}

fn seq_key(seq: u64) -> String {
    format!("{seq:020}")
}

fn index_key(user: &str, seq: u64) -> String {
    format!("{user}/{:020}", u64::MAX - seq)
}

fn check_amount(amount: u64) -> Result<(), LedgerError> {
    if amount == 0 || amount > MAX_AMOUNT {
        Err(LedgerError::BadAmount)
    } else {
        Ok(())
    }
}

fn load_account(tx: &Tx<'_>, user: &str, missing: LedgerError) -> Result<Account, LedgerError> {
    match tx.get(Table::Accounts, user) {
        Err(StoreError::Missing) => Err(missing),
        r => Ok(r?),
    }
}

fn load_txn(tx: &Tx<'_>, txn_id: &str) -> Result<Transaction, LedgerError> {
    match tx.get(Table::Transactions, txn_id) {
        Err(StoreError::Missing) => Err(LedgerError::UnknownTxn),
        r => Ok(r?),
    }
}

fn transition(
    txn: &mut Transaction,
    to: TxnState,
    actor: &str,
    outcome: Option<DisputeOutcome>,
    ev: &mut Events,
) -> Result<(), LedgerError> {
    if !txn.history.is_empty() && !txn.state.can_move_to(to) {
        return Err(LedgerError::IllegalTransition(txn.state, to));
    }
    txn.state = to;
    txn.history.push(HistoryEntry {
        state: to,
        ts: ev.ts,
        actor: actor.to_owned(),
    });
    ev.push(LedgerEntry::Transition {
        txn_id: txn.txn_id,
        state: to,
        actor: actor.to_owned(),
        payer: txn.payer.clone(),
        payee: txn.payee.clone(),
        amount: txn.amount,
        channel: txn.channel,
        outcome,
    });
    Ok(())
}

/// Move `amount` between accounts inside `tx`.
fn move_funds(
    tx: &mut Tx<'_>,
    from: &str,
    to: &str,
    amount: u64,
    short: LedgerError,
) -> Result<(), LedgerError> {
    let mut src = load_account(tx, from, LedgerError::UnknownAccount)?;
    let mut dst = load_account(tx, to, LedgerError::UnknownAccount)?;
    src.balance = src.balance.checked_sub(amount).ok_or(short)?;
    dst.balance = dst.balance.checked_add(amount).ok_or(LedgerError::BadAmount)?;
    tx.put(Table::Accounts, from, &src, None)?;
    tx.put(Table::Accounts, to, &dst, None)?;
    Ok(())
}

fn save_txn(tx: &mut Tx<'_>, txn: &Transaction) -> Result<(), LedgerError> {
    tx.put(Table::Transactions, &txn.txn_id.to_string(), txn, None)?;
    Ok(())
}

pub struct Ledger {
    store: Store,
    app_key: AppKey,
    clock: SharedClock,
    audit: Arc<AuditLog>,
    config: LedgerConfig,
    log: Mutex<LogState>,
}

impl Ledger {
    /// Ledger over `store`. With `dir`, events are also appended to
    /// `dir/ledger.jsonl`; any events the store committed but the log missed
    /// (crash between the two writes) are appended on open.
    pub fn open(
        store: Store,
        app_key: AppKey,
        clock: SharedClock,
        audit: Arc<AuditLog>,
        config: LedgerConfig,
        dir: Option<&Path>,
    ) -> Result<Self, LedgerError> {
        let stored = Self::stored_events(&store)?;
        let mut file = None;
        if let Some(dir) = dir {
            let path = dir.join(LEDGER_FILE);
            let logged = read_log(&path)?;
            if logged.len() > stored.len() || stored[..logged.len()] != logged[..] {
                return Err(LedgerError::Inconsistent(format!(
                    "{} disagrees with the record store",
                    path.display()
                )));
            }
            let mut text = Vec::new();
            for ev in &logged {
                text.extend(serde_json::to_vec(ev).expect("event serializes"));
                text.push(b'\n');
            }
            for ev in &stored[logged.len()..] {
                text.extend(serde_json::to_vec(ev).expect("event serializes"));
                text.push(b'\n');
            }
            // rewrite only if a tail was missing or torn
            let on_disk = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if on_disk != text.len() as u64 {
                let tmp = dir.join(format!("{LEDGER_FILE}.tmp"));
                let mut f = File::create(&tmp).map_err(StoreError::from)?;
                f.write_all(&text).map_err(StoreError::from)?;
                f.sync_all().map_err(StoreError::from)?;
                std::fs::rename(&tmp, &path).map_err(StoreError::from)?;
            }
            file = Some(
                OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(&path)
                    .map_err(StoreError::from)?,
            );
        }
        Ok(Self {
            store,
            app_key,
            clock,
            audit,
            config,
            log: Mutex::new(LogState {
                file,
                next_seq: stored.len() as u64,
            }),
        })
    }

    pub fn in_memory(store: Store, app_key: AppKey, clock: SharedClock, audit: Arc<AuditLog>) -> Self {
        Self::open(store, app_key, clock, audit, LedgerConfig::default(), None)
            .expect("in-memory ledger opens")
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn is_bank(&self, user: &str) -> bool {
        self.config.bank_users.contains(user)
    }

    pub fn stored_events(store: &Store) -> Result<Vec<LedgerEvent>, LedgerError> {
        Ok(store
            .records
            .scan_prefix::<LedgerEvent>(Table::LedgerEvents, "")?
            .into_iter()
            .map(|(_, e)| e)
            .collect())
    }

    /// All committed events, in order.
    pub fn events(&self) -> Result<Vec<LedgerEvent>, LedgerError> {
        Self::stored_events(&self.store)
    }

    /// Run `f` as one atomic batch and publish the events it produced.
    fn apply<R>(
        &self,
        f: impl FnOnce(&mut Tx<'_>, &mut Events) -> Result<R, LedgerError>,
    ) -> Result<R, LedgerError> {
        let mut log = self.log.lock().unwrap_or_else(|p| p.into_inner());
        let mut ev = Events {
            next: log.next_seq,
            ts: 0,
            list: Vec::new(),
        };
        let out = self.store.records.transact(|tx| {
            ev.ts = tx.now_ms();
            let out = f(tx, &mut ev)?;
            for e in &ev.list {
                tx.insert(Table::LedgerEvents, &seq_key(e.seq), e, None)?;
            }
            Ok::<_, LedgerError>(out)
        })?;
        log.next_seq = ev.next;
        if let Some(file) = log.file.as_mut() {
            let mut text = Vec::new();
            for e in &ev.list {
                text.extend(serde_json::to_vec(e).expect("event serializes"));
                text.push(b'\n');
            }
            if let Err(e) = file.write_all(&text).and_then(|_| file.sync_data()) {
                // the store holds the events; the next open rewrites the log
                tracing::error!("ledger log append failed: {e}");
            }
        }
        for e in &ev.list {
            let audit = match &e.entry {
                LedgerEntry::Open { username, .. } => {
                    AuditEvent::txn(e.ts, "account_open", username, None, None)
                }
                LedgerEntry::Transition {
                    txn_id,
                    state,
                    actor,
                    ..
                } => AuditEvent::txn(
                    e.ts,
                    "txn_transition",
                    actor,
                    Some(txn_id.to_string()),
                    Some(format!("{state:?}")),
                ),
            };
            self.audit.record(audit);
        }
        Ok(out)
    }

    // -- Accounts ---------------------------------------------------------

    /// The bank may open any account with any deposit; anyone else may open
    /// only their own, empty.
    pub fn open_account(&self, actor: &str, username: &str, deposit: u64) -> Result<Account, LedgerError> {
        if !self.is_bank(actor) && (actor != username || deposit != 0) {
            return Err(LedgerError::Forbidden);
        }
        crate::rp::validate_username(username)
            .map_err(|e| LedgerError::Validation(e.to_string()))?;
        if deposit > MAX_AMOUNT {
            return Err(LedgerError::BadAmount);
        }
        self.apply(|tx, ev| {
            if tx.exists(Table::Accounts, username) {
                return Err(LedgerError::AccountExists);
            }
            let acct = Account {
                username: username.to_owned(),
                balance: deposit,
                created_at: ev.ts,
            };
            tx.put(Table::Accounts, username, &acct, None)?;
            ev.push(LedgerEntry::Open {
                username: username.to_owned(),
                deposit,
            });
            Ok(acct)
        })
    }

    pub fn account(&self, username: &str) -> Result<Account, LedgerError> {
        match self.store.records.get(Table::Accounts, username) {
            Err(StoreError::Missing) => Err(LedgerError::UnknownAccount),
            r => Ok(r?),
        }
    }

    pub fn accounts(&self) -> Result<Vec<Account>, LedgerError> {
        Ok(self
            .store
            .records
            .scan_prefix::<Account>(Table::Accounts, "")?
            .into_iter()
            .map(|(_, a)| a)
            .collect())
    }

    pub fn transaction(&self, txn_id: &str) -> Result<Transaction, LedgerError> {
        match self.store.records.get(Table::Transactions, txn_id) {
            Err(StoreError::Missing) => Err(LedgerError::UnknownTxn),
            r => Ok(r?),
        }
    }

    /// Transactions where `username` is payer or payee, newest first.
    pub fn history(&self, username: &str, offset: usize, limit: usize) -> Result<Vec<Transaction>, LedgerError> {
        let ids = self
            .store
            .records
            .scan_prefix::<String>(Table::UserTxns, &format!("{username}/"))?;
        ids.into_iter()
            .skip(offset)
            .take(limit)
            .map(|(_, id)| self.transaction(&id))
            .collect()
    }

    fn new_txn(
        tx: &mut Tx<'_>,
        ev: &mut Events,
        payer: &str,
        payee: &str,
        amount: u64,
        channel: Channel,
        actor: &str,
    ) -> Result<Transaction, LedgerError> {
        let mut txn = Transaction {
            txn_id: crypto::new_auth_token(),
            payer: payer.to_owned(),
            payee: payee.to_owned(),
            amount,
            channel,
            state: TxnState::Pending,
            receipt: None,
            created_at: ev.ts,
            history: Vec::new(),
            token_id: None,
            dispute: None,
        };
        let seq = ev.next;
        transition(&mut txn, TxnState::Pending, actor, None, ev)?;
        let id = txn.txn_id.to_string();
        tx.put(Table::UserTxns, &index_key(payer, seq), &id, None)?;
        tx.put(Table::UserTxns, &index_key(payee, seq), &id, None)?;
        Ok(txn)
    }

    /// Acknowledged → Settled with the balance movement and receipt.
    fn settle(tx: &mut Tx<'_>, ev: &mut Events, txn: &mut Transaction) -> Result<(), LedgerError> {
        move_funds(tx, &txn.payer, &txn.payee, txn.amount, LedgerError::InsufficientFunds)?;
        txn.receipt = Some(Receipt {
            txn_id: txn.txn_id,
            acknowledged_at: ev.ts,
        });
        transition(txn, TxnState::Settled, "ledger", None, ev)
    }

    // -- Direct transfer -----------------------------------------------------

    pub fn direct_transfer(&self, payer: &str, payee: &str, amount: u64) -> Result<Transaction, LedgerError> {
        check_amount(amount)?;
        if payer == payee {
            return Err(LedgerError::SelfTransfer);
        }
        self.apply(|tx, ev| {
            let from = load_account(tx, payer, LedgerError::UnknownAccount)?;
            load_account(tx, payee, LedgerError::UnknownPayee)?;
            if from.balance < amount {
                return Err(LedgerError::InsufficientFunds);
            }
            let mut txn = Self::new_txn(tx, ev, payer, payee, amount, Channel::Direct, payer)?;
            transition(&mut txn, TxnState::Acknowledged, payer, None, ev)?;
            Self::settle(tx, ev, &mut txn)?;
            save_txn(tx, &txn)?;
            Ok(txn)
        })
    }

    // -- Tokens ----------------------------------------------------------

    pub fn create_payment_token(
        &self,
        payee: &str,
        kind: TokenKind,
        amount: Option<u64>,
    ) -> Result<IssuedToken, LedgerError> {
        if let Some(a) = amount {
            check_amount(a)?;
        }
        self.account(payee)?;
        let now = self.clock.now_ms();
        let token = PaymentToken {
            token_id: crypto::new_auth_token(),
            kind,
            payee: payee.to_owned(),
            amount,
            state: TokenState::Active,
            created_at: now,
            expires_at: now + self.config.token_ttl_ms,
            txn_id: None,
        };
        let claims = TokenClaims {
            t: token.token_id,
            k: kind,
            p: token.payee.clone(),
            a: amount,
            x: token.expires_at,
        };
        let pt = serde_json::to_vec(&claims).expect("claims serialize");
        let payload = crypto::seal(&self.app_key, &pt, TOKEN_AD)?.to_b64();
        self.store
            .records
            .insert(Table::PaymentTokens, &token.token_id.to_string(), &token, None)?;
        let presentable = match kind {
            TokenKind::Qr => payload.clone(),
            TokenKind::Nfc => format!("{NFC_PREFIX}{payload}"),
            TokenKind::Link => format!(
                "{}/pay?t={payload}",
                self.config.base_url.trim_end_matches('/')
            ),
        };
        Ok(IssuedToken {
            token,
            payload,
            presentable,
        })
    }

    pub fn token(&self, token_id: &str) -> Result<PaymentToken, LedgerError> {
        match self.store.records.get(Table::PaymentTokens, token_id) {
            Err(StoreError::Missing) => Err(LedgerError::RedeemFailure),
            r => Ok(r?),
        }
    }

    fn open_claims(&self, presentable: &str) -> Result<TokenClaims, LedgerError> {
        let payload = payload_from_presentable(presentable);
        let blob = SealedBlob::from_b64(payload).map_err(|_| LedgerError::RedeemFailure)?;
        let pt = crypto::open(&self.app_key, &blob, TOKEN_AD).map_err(|_| LedgerError::RedeemFailure)?;
        serde_json::from_slice(&pt).map_err(|_| LedgerError::RedeemFailure)
    }

    /// Redeem a token as `payer`. The token is the payee's standing
    /// acknowledgment, so the transaction goes Pending → Acknowledged →
    /// Settled in one batch.
    pub fn redeem_payment_token(
        &self,
        payer: &str,
        presentable: &str,
        amount_if_open: Option<u64>,
    ) -> Result<Transaction, LedgerError> {
        let claims = self.open_claims(presentable)?;
        self.apply(|tx, ev| {
            let key = claims.t.to_string();
            let mut token: PaymentToken = match tx.get(Table::PaymentTokens, &key) {
                Err(StoreError::Missing) => return Err(LedgerError::RedeemFailure),
                r => r?,
            };
            if token.payee != claims.p || token.amount != claims.a || token.kind != claims.k {
                return Err(LedgerError::RedeemFailure);
            }
            match token.state {
                TokenState::Active if ev.ts >= token.expires_at => {
                    // the expiry is recorded, but not as a ledger event
                    token.state = TokenState::Expired;
                    tx.put(Table::PaymentTokens, &key, &token, None)?;
                    return Ok(Err(LedgerError::TokenExpired));
                }
                TokenState::Active => {}
                TokenState::Redeemed => return Err(LedgerError::TokenSpent),
                TokenState::Expired => return Err(LedgerError::TokenExpired),
                TokenState::Revoked => return Err(LedgerError::TokenRevoked),
            }
            if payer == token.payee {
                return Err(LedgerError::SelfRedeem);
            }
            let amount = match (token.amount, amount_if_open) {
                (Some(a), None) => a,
                (Some(a), Some(b)) if a == b => a,
                (None, Some(b)) => {
                    check_amount(b)?;
                    b
                }
                _ => return Err(LedgerError::BadAmount),
            };
            let from = load_account(tx, payer, LedgerError::UnknownAccount)?;
            if from.balance < amount {
                return Err(LedgerError::InsufficientFunds);
            }
            let mut txn =
                Self::new_txn(tx, ev, payer, &token.payee, amount, token.kind.channel(), payer)?;
            txn.token_id = Some(token.token_id);
            let payee = token.payee.clone();
            transition(&mut txn, TxnState::Acknowledged, &payee, None, ev)?;
            Self::settle(tx, ev, &mut txn)?;
            save_txn(tx, &txn)?;
            token.state = TokenState::Redeemed;
            token.txn_id = Some(txn.txn_id);
            tx.put(Table::PaymentTokens, &key, &token, None)?;
            Ok(Ok(txn))
        })?
    }

    pub fn revoke_token(&self, actor: &str, token_id: &str) -> Result<PaymentToken, LedgerError> {
        self.store.records.transact(|tx| {
            let mut token: PaymentToken = match tx.get(Table::PaymentTokens, token_id) {
                Err(StoreError::Missing) => return Err(LedgerError::RedeemFailure),
                r => r?,
            };
            if token.payee != actor {
                return Err(LedgerError::NotParty);
            }
            match token.state {
                TokenState::Active => {}
                TokenState::Redeemed => return Err(LedgerError::TokenSpent),
                TokenState::Expired => return Err(LedgerError::TokenExpired),
                TokenState::Revoked => return Err(LedgerError::TokenRevoked),
            }
            token.state = TokenState::Revoked;
            tx.put(Table::PaymentTokens, token_id, &token, None)?;
            Ok(token)
        })
    }

    // -- Requests --------------------------------------------------------

    pub fn request_payment(&self, payee: &str, payer: &str, amount: u64) -> Result<Transaction, LedgerError> {
        check_amount(amount)?;
        if payer == payee {
            return Err(LedgerError::SelfTransfer);
        }
        self.apply(|tx, ev| {
            load_account(tx, payee, LedgerError::UnknownAccount)?;
            load_account(tx, payer, LedgerError::UnknownAccount)?;
            let txn = Self::new_txn(tx, ev, payer, payee, amount, Channel::Request, payee)?;
            save_txn(tx, &txn)?;
            Ok(txn)
        })
    }

    pub fn acknowledge(&self, payer: &str, txn_id: &str, accept: bool) -> Result<Transaction, LedgerError> {
        self.apply(|tx, ev| {
            let mut txn = load_txn(tx, txn_id)?;
            if txn.payer != payer {
                return Err(LedgerError::NotYourTxn);
            }
            if txn.state != TxnState::Pending {
                return Err(LedgerError::AlreadyConcluded);
            }
            if accept {
                transition(&mut txn, TxnState::Acknowledged, payer, None, ev)?;
                Self::settle(tx, ev, &mut txn)?;
            } else {
                transition(&mut txn, TxnState::Rejected, payer, None, ev)?;
            }
            save_txn(tx, &txn)?;
            Ok(txn)
        })
    }

    // -- Disputes --------------------------------------------------------

    pub fn open_dispute(&self, actor: &str, txn_id: &str, reason: &str) -> Result<Transaction, LedgerError> {
        if reason.len() > MAX_REASON_LEN {
            return Err(LedgerError::Validation(format!(
                "reason longer than {MAX_REASON_LEN} bytes"
            )));
        }
        self.apply(|tx, ev| {
            let mut txn = load_txn(tx, txn_id)?;
            if txn.payer != actor && txn.payee != actor {
                return Err(LedgerError::NotParty);
            }
            if txn.state != TxnState::Settled {
                return Err(LedgerError::NotSettled);
            }
            transition(&mut txn, TxnState::Disputed, actor, None, ev)?;
            txn.dispute = Some(Dispute {
                opened_by: actor.to_owned(),
                reason: reason.to_owned(),
                outcome: None,
            });
            save_txn(tx, &txn)?;
            Ok(txn)
        })
    }

    pub fn resolve_dispute(
        &self,
        actor: &str,
        txn_id: &str,
        outcome: DisputeOutcome,
    ) -> Result<Transaction, LedgerError> {
        if !self.is_bank(actor) {
            return Err(LedgerError::Forbidden);
        }
        self.apply(|tx, ev| {
            let mut txn = load_txn(tx, txn_id)?;
            if txn.state != TxnState::Disputed {
                return Err(LedgerError::NotDisputed);
            }
            if outcome == DisputeOutcome::Reverse {
                move_funds(
                    tx,
                    &txn.payee,
                    &txn.payer,
                    txn.amount,
                    LedgerError::ReversalInsufficientFunds,
                )?;
            }
            transition(&mut txn, TxnState::Resolved, actor, Some(outcome), ev)?;
            if let Some(d) = txn.dispute.as_mut() {
                d.outcome = Some(outcome);
            }
            save_txn(tx, &txn)?;
            Ok(txn)
        })
    }

    // -- Verification ----------------------------------------------------

    /// Replay the committed events and check the result against the
    /// account and transaction tables.
    pub fn verify(&self) -> Result<Replay, LedgerError> {
        verify_store(&self.store)
    }
}

/// Replay `store`'s ledger events and compare with its account and
/// transaction tables.
pub fn verify_store(store: &Store) -> Result<Replay, LedgerError> {
    let events = Ledger::stored_events(store)?;
    let r = replay(&events)?;
    check_against_store(&r, store)?;
    Ok(r)
}

/// Compare a replay with the balances, transaction states and histories
/// held in `store`.
pub fn check_against_store(r: &Replay, store: &Store) -> Result<(), LedgerError> {
    let accounts: BTreeMap<String, u64> = store
        .records
        .scan_prefix::<Account>(Table::Accounts, "")?
        .into_iter()
        .map(|(k, a)| (k, a.balance))
        .collect();
    if accounts != r.balances {
        return Err(LedgerError::Inconsistent("balances differ from replay".into()));
    }
    if r.total() != r.minted {
        return Err(LedgerError::Inconsistent(format!(
            "total {} != minted {}",
            r.total(),
            r.minted
        )));
    }
    let txns = store.records.scan_prefix::<Transaction>(Table::Transactions, "")?;
    if txns.len() != r.states.len() {
        return Err(LedgerError::Inconsistent(format!(
            "{} transactions stored, {} replayed",
            txns.len(),
            r.states.len()
        )));
    }
    for (_, t) in txns {
        let states: Vec<TxnState> = t.history.iter().map(|h| h.state).collect();
        if !is_legal_path(&states) || r.states.get(&t.txn_id) != Some(&t.state) {
            return Err(LedgerError::Inconsistent(format!("transaction {}", t.txn_id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
