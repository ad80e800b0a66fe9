//! Structured audit log (`audit.jsonl`).
//!
//! One line per authentication outcome and per ledger state transition.
//! Lines never carry cookies, tokens, link payloads or key material.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;

pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Auth,
    Txn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub ts: Millis,
    pub kind: AuditKind,
    pub action: String,
    /// `ok` or an error code.
    pub outcome: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
}

impl AuditEvent {
    pub fn auth(ts: Millis, action: &str, outcome: &str, subject: &str, ip: Option<String>) -> Self {
        Self {
            ts,
            kind: AuditKind::Auth,
            action: action.to_owned(),
            outcome: outcome.to_owned(),
            subject: subject.to_owned(),
            ip,
            txn_id: None,
            state: None,
        }
    }

    pub fn txn(ts: Millis, action: &str, actor: &str, txn_id: Option<String>, state: Option<String>) -> Self {
        Self {
            ts,
            kind: AuditKind::Txn,
            action: action.to_owned(),
            outcome: "ok".to_owned(),
            subject: actor.to_owned(),
            ip: None,
            txn_id,
            state,
        }
    }
}

#[derive(Default)]
pub struct AuditLog {
    file: Option<Mutex<File>>,
    mem: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    /// Events kept in memory only.
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(AUDIT_FILE))?;
        Ok(Self {
            file: Some(Mutex::new(f)),
            mem: Mutex::default(),
        })
    }

    pub fn record(&self, event: AuditEvent) {
        if let Some(f) = &self.file {
            let mut line = serde_json::to_vec(&event).expect("audit event serializes");
            line.push(b'\n');
            let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = f.write_all(&line) {
                tracing::error!("audit log write failed: {e}");
            }
        }
        self.mem.lock().unwrap_or_else(|p| p.into_inner()).push(event);
    }

    /// Events recorded by this process.
    pub fn events(&self) -> Vec<AuditEvent> {
        self.mem.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn read_file(path: &Path) -> std::io::Result<Vec<AuditEvent>> {
        let text = std::fs::read_to_string(path)?;
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }
}
