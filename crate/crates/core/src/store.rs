//! Persistence: a blob store for public keys and a journaled record store.
//!
//! The record store keeps typed tables in memory and appends every committed
//! batch as one line of `records.jsonl` (fsync'd before the commit returns).
//! Reopening replays the journal; a torn final line is discarded, so the
//! recovered state is always a prefix of acknowledged commits.
//!
//! All mutations go through [`RecordStore::transact`], which runs under one
//! lock. That lock is the global ordering point and is what makes
//! [`RecordStore::take`] linearizable.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::{Millis, SharedClock};

pub const JOURNAL_FILE: &str = "records.jsonl";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("record missing")]
    Missing,
    #[error("duplicate key")]
    DuplicateKey,
    #[error("key rejected: {0:?}")]
    KeyRejected(String),
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Users,
    Emails,
    Credentials,
    Challenges,
    PendingTokens,
    LinkTokens,
    PaymentTokens,
    Transactions,
    Accounts,
    /// `<username>/<seq>` → txn id; the one secondary index.
    UserTxns,
    /// Ledger transition log, keyed by zero-padded sequence number.
    LedgerEvents,
}

impl Table {
    pub const ALL: [Table; 11] = [
        Table::Users,
        Table::Emails,
        Table::Credentials,
        Table::Challenges,
        Table::PendingTokens,
        Table::LinkTokens,
        Table::PaymentTokens,
        Table::Transactions,
        Table::Accounts,
        Table::UserTxns,
        Table::LedgerEvents,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expires_at: Option<Millis>,
}

impl Entry {
    fn live(&self, now: Millis) -> bool {
        self.expires_at.is_none_or(|t| now < t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Put {
        table: Table,
        key: String,
        value: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expires_at: Option<Millis>,
    },
    Del {
        table: Table,
        key: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalLine {
    seq: u64,
    ops: Vec<Op>,
}

#[derive(Default)]
struct Tables(HashMap<Table, BTreeMap<String, Entry>>);

impl Tables {
    fn apply(&mut self, op: Op) {
        match op {
            Op::Put {
                table,
                key,
                value,
                expires_at,
            } => {
                self.0
                    .entry(table)
                    .or_default()
                    .insert(key, Entry { value, expires_at });
            }
            Op::Del { table, key } => {
                if let Some(t) = self.0.get_mut(&table) {
                    t.remove(&key);
                }
            }
        }
    }

    fn get(&self, table: Table, key: &str) -> Option<&Entry> {
        self.0.get(&table).and_then(|t| t.get(key))
    }
}

struct Inner {
    tables: Tables,
    journal: Option<File>,
    seq: u64,
}

/// Journaled record store. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct RecordStore {
    inner: Arc<Mutex<Inner>>,
    clock: SharedClock,
    dir: Option<PathBuf>,
}

impl RecordStore {
    pub fn in_memory(clock: SharedClock) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                tables: Tables::default(),
                journal: None,
                seq: 0,
            })),
            clock,
            dir: None,
        }
    }

    /// Open (or create) `dir/records.jsonl` and replay it.
    pub fn open(dir: &Path, clock: SharedClock) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let (tables, seq, good_len) = replay(&mut file)?;
        let total = file.metadata()?.len();
        if good_len < total {
            tracing::warn!(
                discarded = total - good_len,
                "truncating torn tail of {}",
                path.display()
            );
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                tables,
                journal: Some(file),
                seq,
            })),
            clock,
            dir: Some(dir.to_owned()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn now_ms(&self) -> Millis {
        self.clock.now_ms()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Run `f` against a consistent view and commit its writes as one
    /// journal line. Nothing is written if `f` returns `Err`.
    pub fn transact<R, E>(&self, f: impl FnOnce(&mut Tx<'_>) -> Result<R, E>) -> Result<R, E>
    where
        E: From<StoreError>,
    {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        let mut tx = Tx {
            base: &inner.tables,
            overlay: HashMap::new(),
            ops: Vec::new(),
            now,
        };
        let out = f(&mut tx)?;
        let ops = std::mem::take(&mut tx.ops);
        drop(tx);
        if !ops.is_empty() {
            commit(&mut inner, ops)?;
        }
        Ok(out)
    }

    pub fn insert<T: Serialize>(
        &self,
        table: Table,
        key: &str,
        record: &T,
        ttl_ms: Option<u64>,
    ) -> Result<(), StoreError> {
        self.transact(|tx| tx.insert(table, key, record, ttl_ms))
    }

    pub fn put<T: Serialize>(&self, table: Table, key: &str, record: &T) -> Result<(), StoreError> {
        self.transact(|tx| tx.put(table, key, record, None))
    }

    pub fn get<T: DeserializeOwned>(&self, table: Table, key: &str) -> Result<T, StoreError> {
        let now = self.clock.now_ms();
        let inner = self.lock();
        match inner.tables.get(table, key) {
            Some(e) if e.live(now) => decode(&e.value),
            _ => Err(StoreError::Missing),
        }
    }

    /// Atomic read-and-delete. Of any number of concurrent takers of one
    /// key, exactly one receives the record.
    pub fn take<T: DeserializeOwned>(&self, table: Table, key: &str) -> Result<T, StoreError> {
        self.transact(|tx| tx.take(table, key))
    }

    pub fn delete(&self, table: Table, key: &str) -> Result<(), StoreError> {
        self.transact(|tx| {
            tx.delete(table, key);
            Ok(())
        })
    }

    /// Live records whose key starts with `prefix`, in key order.
    pub fn scan_prefix<T: DeserializeOwned>(
        &self,
        table: Table,
        prefix: &str,
    ) -> Result<Vec<(String, T)>, StoreError> {
        let now = self.clock.now_ms();
        let inner = self.lock();
        let Some(t) = inner.tables.0.get(&table) else {
            return Ok(Vec::new());
        };
        t.range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .filter(|(_, e)| e.live(now))
            .map(|(k, e)| Ok((k.clone(), decode(&e.value)?)))
            .collect()
    }

    pub fn len(&self, table: Table) -> usize {
        let now = self.clock.now_ms();
        let inner = self.lock();
        inner
            .tables
            .0
            .get(&table)
            .map(|t| t.values().filter(|e| e.live(now)).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self, table: Table) -> bool {
        self.len(table) == 0
    }

    /// Number of committed journal lines (or in-memory commits).
    pub fn commits(&self) -> u64 {
        self.lock().seq
    }

    /// Physically remove expired records. Returns how many were dropped.
    pub fn sweep_expired(&self) -> Result<usize, StoreError> {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        let ops: Vec<Op> = inner
            .tables
            .0
            .iter()
            .flat_map(|(table, t)| {
                t.iter()
                    .filter(|(_, e)| !e.live(now))
                    .map(|(k, _)| Op::Del {
                        table: *table,
                        key: k.clone(),
                    })
            })
            .collect();
        let n = ops.len();
        if n > 0 {
            commit(&mut inner, ops)?;
        }
        Ok(n)
    }
}

fn decode<T: DeserializeOwned>(v: &Value) -> Result<T, StoreError> {
    T::deserialize(v).map_err(|e| StoreError::Corrupt(e.to_string()))
}

fn commit(inner: &mut Inner, ops: Vec<Op>) -> Result<(), StoreError> {
    let seq = inner.seq + 1;
    if let Some(file) = inner.journal.as_mut() {
        let line = JournalLine { seq, ops };
        let mut buf = serde_json::to_vec(&line).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        buf.push(b'\n');
        file.write_all(&buf)?;
        file.sync_data()?;
        for op in line.ops {
            inner.tables.apply(op);
        }
    } else {
        for op in ops {
            inner.tables.apply(op);
        }
    }
    inner.seq = seq;
    Ok(())
}

/// Returns the rebuilt tables, last sequence number, and the byte length of
/// the valid journal prefix.
fn replay(file: &mut File) -> Result<(Tables, u64, u64), StoreError> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&*file);
    let mut tables = Tables::default();
    let mut seq = 0;
    let mut good = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 || line.last() != Some(&b'\n') {
            break;
        }
        let Ok(parsed) = serde_json::from_slice::<JournalLine>(&line) else {
            break;
        };
        if parsed.seq != seq + 1 {
            return Err(StoreError::Corrupt(format!(
                "journal sequence gap: expected {}, found {}",
                seq + 1,
                parsed.seq
            )));
        }
        seq = parsed.seq;
        for op in parsed.ops {
            tables.apply(op);
        }
        good += n as u64;
    }
    Ok((tables, seq, good))
}

/// A transaction view handed to [`RecordStore::transact`] closures.
pub struct Tx<'a> {
    base: &'a Tables,
    overlay: HashMap<(Table, String), Option<Entry>>,
    ops: Vec<Op>,
    now: Millis,
}

impl Tx<'_> {
    pub fn now_ms(&self) -> Millis {
        self.now
    }

    fn entry(&self, table: Table, key: &str) -> Option<&Entry> {
        match self.overlay.get(&(table, key.to_owned())) {
            Some(staged) => staged.as_ref(),
            None => self.base.get(table, key),
        }
        .filter(|e| e.live(self.now))
    }

    pub fn exists(&self, table: Table, key: &str) -> bool {
        self.entry(table, key).is_some()
    }

    pub fn get<T: DeserializeOwned>(&self, table: Table, key: &str) -> Result<T, StoreError> {
        self.entry(table, key)
            .ok_or(StoreError::Missing)
            .and_then(|e| decode(&e.value))
    }

    pub fn put<T: Serialize>(
        &mut self,
        table: Table,
        key: &str,
        record: &T,
        ttl_ms: Option<u64>,
    ) -> Result<(), StoreError> {
        let value = serde_json::to_value(record).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let expires_at = ttl_ms.map(|t| self.now.saturating_add(t));
        self.overlay.insert(
            (table, key.to_owned()),
            Some(Entry {
                value: value.clone(),
                expires_at,
            }),
        );
        self.ops.push(Op::Put {
            table,
            key: key.to_owned(),
            value,
            expires_at,
        });
        Ok(())
    }

    pub fn insert<T: Serialize>(
        &mut self,
        table: Table,
        key: &str,
        record: &T,
        ttl_ms: Option<u64>,
    ) -> Result<(), StoreError> {
        if self.exists(table, key) {
            return Err(StoreError::DuplicateKey);
        }
        self.put(table, key, record, ttl_ms)
    }

    pub fn delete(&mut self, table: Table, key: &str) {
        self.overlay.insert((table, key.to_owned()), None);
        self.ops.push(Op::Del {
            table,
            key: key.to_owned(),
        });
    }

    pub fn take<T: DeserializeOwned>(&mut self, table: Table, key: &str) -> Result<T, StoreError> {
        let rec = self.get(table, key)?;
        self.delete(table, key);
        Ok(rec)
    }
}

// ---------------------------------------------------------------------------
// Blobs

/// Namespaced byte storage at `blobs/<ns>/<key>`.
#[derive(Clone)]
pub struct BlobStore {
    root: Option<PathBuf>,
    mem: Arc<Mutex<HashMap<(String, String), Vec<u8>>>>,
}

/// Accepts `[A-Za-z0-9_.-]+`, excluding `.` and `..`.
pub fn check_key(key: &str) -> Result<(), StoreError> {
    let ok = !key.is_empty()
        && key != "."
        && key != ".."
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::KeyRejected(key.to_owned()))
    }
}

impl BlobStore {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            mem: Arc::default(),
        }
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let root = dir.join(BLOB_DIR);
        fs::create_dir_all(&root)?;
        Ok(Self {
            root: Some(root),
            mem: Arc::default(),
        })
    }

    /// Split a `ns/key` path, e.g. `pubkey/alice`.
    pub fn split_path(path: &str) -> Result<(&str, &str), StoreError> {
        let (ns, key) = path
            .split_once('/')
            .ok_or_else(|| StoreError::KeyRejected(path.to_owned()))?;
        check_key(ns)?;
        check_key(key)?;
        Ok((ns, key))
    }

    /// Durable before returning: written to a temp file, fsync'd, renamed.
    pub fn put_blob(&self, ns: &str, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        check_key(ns)?;
        check_key(key)?;
        match &self.root {
            None => {
                self.mem
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .insert((ns.to_owned(), key.to_owned()), bytes.to_vec());
            }
            Some(root) => {
                let dir = root.join(ns);
                fs::create_dir_all(&dir)?;
                let tmp = dir.join(format!(".{key}.tmp.{}", uuid::Uuid::new_v4().simple()));
                {
                    let mut f = File::create(&tmp)?;
                    f.write_all(bytes)?;
                    f.sync_all()?;
                }
                fs::rename(&tmp, dir.join(key))?;
                File::open(&dir)?.sync_all()?;
            }
        }
        Ok(())
    }

    pub fn get_blob(&self, ns: &str, key: &str) -> Result<Vec<u8>, StoreError> {
        check_key(ns)?;
        check_key(key)?;
        match &self.root {
            None => self
                .mem
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .get(&(ns.to_owned(), key.to_owned()))
                .cloned()
                .ok_or(StoreError::Missing),
            Some(root) => match fs::read(root.join(ns).join(key)) {
                Ok(b) => Ok(b),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(StoreError::Missing),
                Err(e) => Err(e.into()),
            },
        }
    }
}

/// Records plus blobs, opened together.
#[derive(Clone)]
pub struct Store {
    pub records: RecordStore,
    pub blobs: BlobStore,
}

impl Store {
    pub fn in_memory(clock: SharedClock) -> Self {
        Self {
            records: RecordStore::in_memory(clock),
            blobs: BlobStore::in_memory(),
        }
    }

    pub fn open(dir: &Path, clock: SharedClock) -> Result<Self, StoreError> {
        Ok(Self {
            records: RecordStore::open(dir, clock)?,
            blobs: BlobStore::open(dir)?,
        })
    }
}
