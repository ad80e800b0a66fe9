//! Relying party: registration and authentication ceremonies, the pending
//! auth-token exchange, one-time email links, and IP-bound session cookies.
//!
//! Every single-use object (challenge, pending token, link token) is consumed
//! with an atomic take against the record store, so concurrent replays see
//! exactly one success.

use std::fs::OpenOptions;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::audit::{AuditEvent, AuditLog};
use crate::authenticator::{
    AssertionResponse, AuthenticatorData, ClientData, MakeCredentialResponse, CLIENT_DATA_CREATE,
    CLIENT_DATA_GET,
};
use crate::clock::{Millis, SharedClock};
use crate::crypto::{
    self, b64, sha256, AuthPublicKey, Ceremony, Challenge, CryptoError, SealedBlob, ServerKeys,
};
use crate::store::{self, Store, StoreError, Table};

pub const DEFAULT_RP_ID: &str = "pp2pp.local";
pub const MAX_USERNAME_LEN: usize = 64;
pub const MAX_EMAIL_LEN: usize = 254;
pub const PUBKEY_NS: &str = "pubkey";
pub const MIN_CREDENTIAL_ID_LEN: usize = 16;
pub const MAX_CREDENTIAL_ID_LEN: usize = 1023;
pub const OUTBOX_FILE: &str = "outbox.jsonl";
const USERNAME_COOKIE_AD: &[u8] = b"username-cookie";
/// Expired challenges stay readable this long so callers get
/// `ChallengeExpired` rather than `ChallengeMissing`.
const CHALLENGE_GRACE_MS: u64 = 60_000;

#[derive(Debug, Clone)]
pub struct RpConfig {
    pub rp_id: String,
    /// Prefix for one-time links, e.g. `https://pp2pp.local`.
    pub base_url: String,
    pub challenge_ttl_ms: u64,
    pub pending_token_ttl_ms: u64,
    pub link_ttl_ms: u64,
    pub session_ttl_ms: u64,
    /// Minimum wall time for user-lookup paths, so unknown and known users
    /// respond alike.
    pub uniform_floor: Duration,
}

impl Default for RpConfig {
    fn default() -> Self {
        Self {
            rp_id: DEFAULT_RP_ID.to_owned(),
            base_url: format!("https://{DEFAULT_RP_ID}"),
            challenge_ttl_ms: 120_000,
            pending_token_ttl_ms: 60_000,
            link_ttl_ms: 10 * 60_000,
            session_ttl_ms: 30 * 60_000,
            uniform_floor: Duration::from_millis(10),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RpError {
    #[error("user already exists")]
    UserExists,
    #[error("validation: {0}")]
    Validation(String),
    #[error("unknown user")]
    UnknownUser,
    #[error("challenge expired")]
    ChallengeExpired,
    #[error("challenge missing or already used")]
    ChallengeMissing,
    #[error("bad signature")]
    BadSignature,
    #[error("relying party id mismatch")]
    RpIdMismatch,
    #[error("sign counter regression; credential locked")]
    CounterRegression,
    #[error("credential locked; re-enrollment required")]
    CredentialLocked,
    #[error("malformed assertion: {0}")]
    MalformedAssertion(String),
    #[error("token missing, expired or already used")]
    TokenMissing,
    #[error("session invalid")]
    SessionInvalid,
    #[error("link invalid, expired or already used")]
    LinkInvalid,
    #[error("link opened from a different address")]
    IpMismatch,
    #[error("storage: {0}")]
    Store(StoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl From<StoreError> for RpError {
    fn from(e: StoreError) -> Self {
        RpError::Store(e)
    }
}

impl RpError {
    pub fn code(&self) -> &'static str {
        match self {
            RpError::UserExists => "user_exists",
            RpError::Validation(_) => "validation",
            RpError::UnknownUser => "unknown_user",
            RpError::ChallengeExpired => "challenge_expired",
            RpError::ChallengeMissing => "challenge_missing",
            RpError::BadSignature => "bad_signature",
            RpError::RpIdMismatch => "rp_id_mismatch",
            RpError::CounterRegression => "counter_regression",
            RpError::CredentialLocked => "credential_locked",
            RpError::MalformedAssertion(_) => "malformed_assertion",
            RpError::TokenMissing => "token_missing",
            RpError::SessionInvalid => "session_invalid",
            RpError::LinkInvalid => "link_invalid",
            RpError::IpMismatch => "ip_mismatch",
            RpError::Store(_) => "storage",
            RpError::Crypto(_) => "crypto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    pub email: String,
    pub registered_at: Millis,
    /// Blob path of the public key, e.g. `pubkey/alice`.
    pub credential_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub username: String,
    pub credential_id: String,
    pub sign_count: u32,
    pub locked: bool,
    pub registered_at: Millis,
    pub credential_ref: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChallengeRecord {
    challenge: Challenge,
    #[serde(default)]
    email: Option<String>,
    #[serde(default)]
    reenroll: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAuthToken {
    pub token: Uuid,
    pub username: String,
    pub issued_at: Millis,
    pub ttl_ms: u64,
    pub issued_to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinkRecord {
    username: String,
    requester_ip: IpAddr,
    issued_at: Millis,
}

/// Session contents; the cookie is this, sealed with the client IP as
/// associated data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    #[serde(rename = "u")]
    pub username: String,
    pub client_ip: IpAddr,
    #[serde(rename = "iat")]
    pub issued_at: Millis,
    #[serde(rename = "exp")]
    pub expiry: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuedSession {
    pub session: Session,
    /// base64url sealed cookie value.
    pub cookie: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxMessage {
    pub to: String,
    pub subject: String,
    pub link: String,
    pub issued_at: Millis,
}

/// File-backed email stand-in (`outbox.jsonl`).
pub struct Outbox {
    path: Option<PathBuf>,
    mem: Mutex<Vec<OutboxMessage>>,
}

impl Outbox {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            mem: Mutex::default(),
        }
    }

    pub fn open(dir: &Path) -> Self {
        Self {
            path: Some(dir.join(OUTBOX_FILE)),
            mem: Mutex::default(),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn send(&self, msg: OutboxMessage) -> Result<(), RpError> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&msg).expect("outbox message serializes");
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(StoreError::from)?;
            f.write_all(&line).map_err(StoreError::from)?;
        }
        self.mem.lock().unwrap_or_else(|p| p.into_inner()).push(msg);
        Ok(())
    }

    /// Messages sent by this process.
    pub fn messages(&self) -> Vec<OutboxMessage> {
        self.mem.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn read_file(path: &Path) -> std::io::Result<Vec<OutboxMessage>> {
        Ok(std::fs::read_to_string(path)?
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }
}

pub fn validate_username(username: &str) -> Result<(), RpError> {
    if username.is_empty() || username.len() > MAX_USERNAME_LEN {
        return Err(RpError::Validation(format!(
            "username must be 1..={MAX_USERNAME_LEN} characters"
        )));
    }
    store::check_key(username)
        .map_err(|_| RpError::Validation("username may contain only [A-Za-z0-9_.-]".into()))
}

fn validate_email(email: &str) -> Result<(), RpError> {
    let ok = email.len() <= MAX_EMAIL_LEN
        && email.split_once('@').is_some_and(|(l, d)| !l.is_empty() && !d.is_empty())
        && !email.chars().any(|c| c.is_whitespace() || c.is_control());
    if ok {
        Ok(())
    } else {
        Err(RpError::Validation("invalid email address".into()))
    }
}

fn pad_to_floor(start: Instant, floor: Duration) {
    if let Some(rest) = floor.checked_sub(start.elapsed()) {
        std::thread::sleep(rest);
    }
}

pub struct RelyingParty {
    config: RpConfig,
    store: Store,
    keys: ServerKeys,
    clock: SharedClock,
    outbox: Outbox,
    audit: Arc<AuditLog>,
    /// Held from the existence check through the blob write and the record
    /// commit, so a losing concurrent registration cannot overwrite the
    /// winner's `pubkey/<username>`.
    registration: Mutex<()>,
}

impl RelyingParty {
    pub fn new(
        config: RpConfig,
        store: Store,
        keys: ServerKeys,
        clock: SharedClock,
        outbox: Outbox,
        audit: Arc<AuditLog>,
    ) -> Self {
        Self {
            config,
            store,
            keys,
            clock,
            outbox,
            audit,
            registration: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &RpConfig {
        &self.config
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    fn audit_auth<T>(&self, action: &str, subject: &str, ip: Option<IpAddr>, r: &Result<T, RpError>) {
        let outcome = match r {
            Ok(_) => "ok",
            Err(e) => e.code(),
        };
        self.audit.record(AuditEvent::auth(
            self.now(),
            action,
            outcome,
            subject,
            ip.map(|i| i.to_string()),
        ));
    }

    pub fn user(&self, username: &str) -> Result<UserRecord, RpError> {
        match self.store.records.get(Table::Users, username) {
            Err(StoreError::Missing) => Err(RpError::UnknownUser),
            r => Ok(r?),
        }
    }

    pub fn credential(&self, username: &str) -> Result<CredentialRecord, RpError> {
        match self.store.records.get(Table::Credentials, username) {
            Err(StoreError::Missing) => Err(RpError::UnknownUser),
            r => Ok(r?),
        }
    }

    fn issue_challenge(&self, record: ChallengeRecord) -> Result<Challenge, RpError> {
        let key = record.challenge.nonce_b64();
        self.store.records.insert(
            Table::Challenges,
            &key,
            &record,
            Some(self.config.challenge_ttl_ms + CHALLENGE_GRACE_MS),
        )?;
        Ok(record.challenge)
    }

    // -- Registration ---------------------------------------------------

    pub fn begin_registration(&self, username: &str, email: &str) -> Result<Challenge, RpError> {
        validate_username(username)?;
        validate_email(email)?;
        if self.store.records.get::<UserRecord>(Table::Users, username).is_ok() {
            return Err(RpError::UserExists);
        }
        if self.store.records.get::<String>(Table::Emails, email).is_ok() {
            return Err(RpError::Validation("email already registered".into()));
        }
        let challenge = crypto::new_challenge_with_ttl(
            Ceremony::Registration,
            username,
            &*self.clock,
            self.config.challenge_ttl_ms,
        )?;
        self.issue_challenge(ChallengeRecord {
            challenge,
            email: Some(email.to_owned()),
            reenroll: false,
        })
    }

    /// Registration challenge for an existing user replacing a lost card.
    /// Callers must have checked the bank role.
    pub fn begin_reenrollment(&self, username: &str) -> Result<Challenge, RpError> {
        let user = self.user(username)?;
        let challenge = crypto::new_challenge_with_ttl(
            Ceremony::Registration,
            username,
            &*self.clock,
            self.config.challenge_ttl_ms,
        )?;
        self.issue_challenge(ChallengeRecord {
            challenge,
            email: Some(user.email),
            reenroll: true,
        })
    }

    /// Atomically consume the challenge named in `client_data` if it belongs
    /// to `username` and `ceremony`.
    fn consume_challenge(
        &self,
        username: &str,
        ceremony: Ceremony,
        client_data: &[u8],
    ) -> Result<ChallengeRecord, RpError> {
        let expected = match ceremony {
            Ceremony::Registration => CLIENT_DATA_CREATE,
            Ceremony::Authentication => CLIENT_DATA_GET,
        };
        let cd = ClientData::parse(client_data)
            .ok_or_else(|| RpError::MalformedAssertion("client data is not JSON".into()))?;
        if cd.kind != expected {
            return Err(RpError::MalformedAssertion(format!(
                "client data type {:?}, expected {expected:?}",
                cd.kind
            )));
        }
        let now = self.now();
        let record: ChallengeRecord = self.store.records.transact(|tx| {
            let rec: ChallengeRecord = match tx.get(Table::Challenges, &cd.challenge) {
                Err(StoreError::Missing) => return Err(RpError::ChallengeMissing),
                r => r?,
            };
            if rec.challenge.user_ref != username || rec.challenge.ceremony != ceremony {
                return Err(RpError::ChallengeMissing);
            }
            tx.delete(Table::Challenges, &cd.challenge);
            Ok(rec)
        })?;
        if record.challenge.is_expired(now) {
            return Err(RpError::ChallengeExpired);
        }
        Ok(record)
    }

    fn check_authenticator_data(&self, bytes: &[u8]) -> Result<AuthenticatorData, RpError> {
        let ad = AuthenticatorData::parse_prefix(bytes)
            .ok_or_else(|| RpError::MalformedAssertion("authenticator data length".into()))?;
        if ad.rp_id_hash != sha256(self.config.rp_id.as_bytes()) {
            return Err(RpError::RpIdMismatch);
        }
        if !ad.user_present() || !ad.user_verified() {
            return Err(RpError::MalformedAssertion("user presence/verification flags".into()));
        }
        Ok(ad)
    }

    pub fn finish_registration(
        &self,
        username: &str,
        response: &MakeCredentialResponse,
    ) -> Result<CredentialRecord, RpError> {
        let r = self.finish_registration_inner(username, response);
        self.audit_auth("register_finish", username, None, &r);
        r
    }

    fn finish_registration_inner(
        &self,
        username: &str,
        response: &MakeCredentialResponse,
    ) -> Result<CredentialRecord, RpError> {
        validate_username(username)?;
        let att = &response.attestation;
        let rec = self.consume_challenge(username, Ceremony::Registration, &att.client_data)?;
        let ad = self.check_authenticator_data(&att.authenticator_data)?;
        if att.credential_id != response.credential_id
            || !(MIN_CREDENTIAL_ID_LEN..=MAX_CREDENTIAL_ID_LEN).contains(&response.credential_id.len())
        {
            return Err(RpError::MalformedAssertion("credential id".into()));
        }
        let pk = AuthPublicKey::from_der(&response.public_key)
            .map_err(|_| RpError::MalformedAssertion("public key".into()))?;
        if !crypto::verify(&pk, &att.signed_message(), &att.signature) {
            return Err(RpError::BadSignature);
        }

        let _guard = self.registration.lock().unwrap_or_else(|p| p.into_inner());
        let exists = self.store.records.get::<UserRecord>(Table::Users, username).is_ok();
        match (exists, rec.reenroll) {
            (true, false) => return Err(RpError::UserExists),
            (false, true) => return Err(RpError::UnknownUser),
            _ => {}
        }
        self.store
            .blobs
            .put_blob(PUBKEY_NS, username, &pk.to_der())?;
        let now = self.now();
        let credential_ref = format!("{PUBKEY_NS}/{username}");
        let email = rec.email.unwrap_or_default();
        let cred = CredentialRecord {
            username: username.to_owned(),
            credential_id: b64::encode(&response.credential_id),
            sign_count: ad.sign_count,
            locked: false,
            registered_at: now,
            credential_ref: credential_ref.clone(),
        };
        self.store.records.transact(|tx| {
            let existing: Option<UserRecord> = tx.get(Table::Users, username).ok();
            match (&existing, rec.reenroll) {
                (Some(_), false) => return Err(RpError::UserExists),
                (None, true) => return Err(RpError::UnknownUser),
                _ => {}
            }
            if !rec.reenroll && tx.exists(Table::Emails, &email) {
                return Err(RpError::Validation("email already registered".into()));
            }
            let user = UserRecord {
                username: username.to_owned(),
                email: email.clone(),
                registered_at: existing.map(|u| u.registered_at).unwrap_or(now),
                credential_ref: Some(credential_ref.clone()),
            };
            tx.put(Table::Users, username, &user, None)?;
            tx.put(Table::Emails, &email, &username, None)?;
            tx.put(Table::Credentials, username, &cred, None)?;
            Ok(())
        })?;
        Ok(cred)
    }

    // -- Authentication -------------------------------------------------

    pub fn begin_authentication(&self, username: &str) -> Result<Challenge, RpError> {
        let start = Instant::now();
        let r = self.begin_authentication_inner(username);
        pad_to_floor(start, self.config.uniform_floor);
        r
    }

    fn begin_authentication_inner(&self, username: &str) -> Result<Challenge, RpError> {
        // Generate before the lookup so both paths do the same work.
        let challenge = crypto::new_challenge_with_ttl(
            Ceremony::Authentication,
            username,
            &*self.clock,
            self.config.challenge_ttl_ms,
        )?;
        validate_username(username).map_err(|_| RpError::UnknownUser)?;
        match self.store.records.get::<CredentialRecord>(Table::Credentials, username) {
            Ok(_) => {}
            Err(StoreError::Missing) => return Err(RpError::UnknownUser),
            Err(e) => return Err(e.into()),
        }
        self.issue_challenge(ChallengeRecord {
            challenge,
            email: None,
            reenroll: false,
        })
    }

    pub fn finish_authentication(
        &self,
        username: &str,
        assertion: &AssertionResponse,
        client_ip: IpAddr,
    ) -> Result<PendingAuthToken, RpError> {
        let r = self.finish_authentication_inner(username, assertion, client_ip);
        self.audit_auth("auth_finish", username, Some(client_ip), &r);
        r
    }

    fn finish_authentication_inner(
        &self,
        username: &str,
        assertion: &AssertionResponse,
        client_ip: IpAddr,
    ) -> Result<PendingAuthToken, RpError> {
        validate_username(username).map_err(|_| RpError::ChallengeMissing)?;
        self.consume_challenge(username, Ceremony::Authentication, &assertion.client_data)?;
        let ad = self.check_authenticator_data(&assertion.authenticator_data)?;

        let cred = self.credential(username)?;
        if cred.locked {
            return Err(RpError::CredentialLocked);
        }
        if b64::encode(&assertion.credential_id) != cred.credential_id {
            return Err(RpError::BadSignature);
        }
        let (ns, key) = store::BlobStore::split_path(&cred.credential_ref)?;
        let pk = AuthPublicKey::from_der(&self.store.blobs.get_blob(ns, key)?)
            .map_err(|_| RpError::Store(StoreError::Corrupt("stored public key".into())))?;
        if !crypto::verify(&pk, &assertion.signed_message(), &assertion.signature) {
            return Err(RpError::BadSignature);
        }

        let regressed = self.store.records.transact(|tx| {
            let mut c: CredentialRecord = tx.get(Table::Credentials, username)?;
            if c.credential_id != cred.credential_id {
                // re-enrolled concurrently
                return Err(RpError::BadSignature);
            }
            if c.locked {
                return Err(RpError::CredentialLocked);
            }
            let regressed = ad.sign_count <= c.sign_count;
            if regressed {
                c.locked = true;
            } else {
                c.sign_count = ad.sign_count;
            }
            tx.put(Table::Credentials, username, &c, None)?;
            Ok::<_, RpError>(regressed)
        })?;
        if regressed {
            return Err(RpError::CounterRegression);
        }

        let pending = PendingAuthToken {
            token: crypto::new_auth_token(),
            username: username.to_owned(),
            issued_at: self.now(),
            ttl_ms: self.config.pending_token_ttl_ms,
            issued_to: client_ip.to_string(),
        };
        self.store.records.insert(
            Table::PendingTokens,
            &pending.token.to_string(),
            &pending,
            Some(pending.ttl_ms),
        )?;
        Ok(pending)
    }

    /// Trade a pending auth token for a session bound to `client_ip`.
    pub fn exchange_token(&self, token: &str, client_ip: IpAddr) -> Result<IssuedSession, RpError> {
        let r = self
            .store
            .records
            .take::<PendingAuthToken>(Table::PendingTokens, token.trim())
            .map_err(|e| match e {
                StoreError::Missing => RpError::TokenMissing,
                e => e.into(),
            })
            .and_then(|p| self.issue_session(&p.username, client_ip));
        let subject = r.as_ref().map(|s| s.session.username.clone()).unwrap_or_default();
        self.audit_auth("token_exchange", &subject, Some(client_ip), &r);
        r
    }

    // -- Sessions -------------------------------------------------------

    pub fn issue_session(&self, username: &str, client_ip: IpAddr) -> Result<IssuedSession, RpError> {
        let now = self.now();
        let session = Session {
            username: username.to_owned(),
            client_ip,
            issued_at: now,
            expiry: now + self.config.session_ttl_ms,
        };
        let pt = serde_json::to_vec(&session).expect("session serializes");
        let blob = crypto::seal(&self.keys.cookie_key, &pt, client_ip.to_string().as_bytes())?;
        Ok(IssuedSession {
            session,
            cookie: blob.to_b64(),
        })
    }

    /// Every failure mode (tamper, other IP, expiry) is `SessionInvalid`.
    pub fn verify_session(&self, cookie: &str, client_ip: IpAddr) -> Result<Session, RpError> {
        let blob = SealedBlob::from_b64(cookie).map_err(|_| RpError::SessionInvalid)?;
        let pt = crypto::open(&self.keys.cookie_key, &blob, client_ip.to_string().as_bytes())
            .map_err(|_| RpError::SessionInvalid)?;
        let session: Session = serde_json::from_slice(&pt).map_err(|_| RpError::SessionInvalid)?;
        if session.client_ip != client_ip || self.now() >= session.expiry {
            return Err(RpError::SessionInvalid);
        }
        Ok(session)
    }

    /// Convenience cookie carrying only the entered username. Grants nothing.
    pub fn username_cookie(&self, username: &str) -> Result<String, RpError> {
        Ok(crypto::seal(&self.keys.app_key, username.as_bytes(), USERNAME_COOKIE_AD)?.to_b64())
    }

    pub fn read_username_cookie(&self, cookie: &str) -> Option<String> {
        let blob = SealedBlob::from_b64(cookie).ok()?;
        let pt = crypto::open(&self.keys.app_key, &blob, USERNAME_COOKIE_AD).ok()?;
        String::from_utf8(pt).ok()
    }

    // -- One-time links -------------------------------------------------

    /// Mail a one-time login link. Unknown emails get the same `Ok(None)`
    /// shape and timing, and nothing is mailed.
    pub fn issue_onetime_link(
        &self,
        email: &str,
        requester_ip: IpAddr,
    ) -> Result<Option<String>, RpError> {
        let start = Instant::now();
        let r = self.issue_onetime_link_inner(email, requester_ip);
        pad_to_floor(start, self.config.uniform_floor);
        r
    }

    fn issue_onetime_link_inner(
        &self,
        email: &str,
        requester_ip: IpAddr,
    ) -> Result<Option<String>, RpError> {
        let token = crypto::new_auth_token();
        let payload = crypto::make_link_payload(token, requester_ip, &self.keys.cookie_key)?;
        let username: String = match self.store.records.get(Table::Emails, email) {
            Ok(u) => u,
            Err(StoreError::Missing) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let now = self.now();
        self.store.records.insert(
            Table::LinkTokens,
            &token.to_string(),
            &LinkRecord {
                username,
                requester_ip,
                issued_at: now,
            },
            Some(self.config.link_ttl_ms),
        )?;
        let link = format!(
            "{}/auth/link/consume?p={payload}",
            self.config.base_url.trim_end_matches('/')
        );
        self.outbox.send(OutboxMessage {
            to: email.to_owned(),
            subject: "Your PP2PP sign-in link".to_owned(),
            link: link.clone(),
            issued_at: now,
        })?;
        Ok(Some(link))
    }

    pub fn consume_onetime_link(
        &self,
        payload: &str,
        client_ip: IpAddr,
    ) -> Result<IssuedSession, RpError> {
        let r = self.consume_onetime_link_inner(payload, client_ip);
        let subject = r.as_ref().map(|s| s.session.username.clone()).unwrap_or_default();
        self.audit_auth("link_consume", &subject, Some(client_ip), &r);
        r
    }

    fn consume_onetime_link_inner(
        &self,
        payload: &str,
        client_ip: IpAddr,
    ) -> Result<IssuedSession, RpError> {
        let (token, ip) = crypto::open_link_payload(payload, &self.keys.cookie_key)
            .map_err(|_| RpError::LinkInvalid)?;
        // The link stays usable by its owner if someone else opens it.
        if ip != client_ip {
            return Err(RpError::IpMismatch);
        }
        let rec: LinkRecord = self
            .store
            .records
            .take(Table::LinkTokens, &token.to_string())
            .map_err(|e| match e {
                StoreError::Missing => RpError::LinkInvalid,
                e => e.into(),
            })?;
        if rec.requester_ip != client_ip {
            return Err(RpError::IpMismatch);
        }
        self.user(&rec.username).map_err(|_| RpError::LinkInvalid)?;
        self.issue_session(&rec.username, client_ip)
    }
}

/// Extract the payload from a full link URL or return the input unchanged.
pub fn link_payload_from(link_or_payload: &str) -> &str {
    link_or_payload
        .split_once("p=")
        .map(|(_, p)| p.split('&').next().unwrap_or(p))
        .unwrap_or(link_or_payload)
}
