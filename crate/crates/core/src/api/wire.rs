//! JSON bodies for every endpoint. Binary fields are base64url without
//! padding.
//!
//! Finish endpoints take a `format` field: `pp2pp` (default) is the
//! software card's own structure; `webauthn` is the browser's
//! `PublicKeyCredential.toJSON()` shape. Both decode to the same internal
//! types here and nowhere else.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::authenticator::{AssertionResponse, MakeCredentialResponse};
use crate::clock::Millis;
use crate::crypto::{b64, Challenge};
use crate::ledger::{DisputeOutcome, TokenKind, Transaction};

/// COSE algorithm identifier for RSASSA-PKCS1-v1_5 with SHA-256.
pub const COSE_RS256: i64 = -257;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Pp2pp,
    Webauthn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterBegin {
    pub username: String,
    pub email: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reenroll {
    pub username: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeBody {
    pub challenge: String,
    pub rp_id: String,
    /// The username's bytes, base64url.
    pub user_handle: String,
    pub timeout_ms: u64,
}

impl ChallengeBody {
    pub fn new(c: &Challenge, rp_id: &str) -> Self {
        Self {
            challenge: c.nonce_b64(),
            rp_id: rp_id.to_owned(),
            user_handle: b64::encode(c.user_ref.as_bytes()),
            timeout_ms: c.ttl_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterFinish {
    pub username: String,
    #[serde(default)]
    pub format: Format,
    pub credential: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub username: String,
    pub credential_id: String,
    pub registered_at: Millis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthBegin {
    pub username: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthFinish {
    pub username: String,
    #[serde(default)]
    pub format: Format,
    pub assertion: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingToken {
    pub token: String,
    pub expires_in_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exchange {
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionBody {
    pub username: String,
    pub expires_at: Millis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkIssue {
    pub email: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConsume {
    pub p: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub status: String,
}

impl Status {
    pub fn new(s: &str) -> Self {
        Self { status: s.to_owned() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenAccount {
    pub username: String,
    #[serde(default)]
    pub deposit: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Page {
    #[serde(default)]
    pub offset: Option<usize>,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryBody {
    pub transactions: Vec<Transaction>,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectPay {
    pub payee: String,
    pub amount: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenCreate {
    pub kind: TokenKind,
    #[serde(default)]
    pub amount: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRedeem {
    /// Any presentable form: bare payload, `NFC1:` tag or link.
    pub token: String,
    #[serde(default)]
    pub amount: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRevoke {
    pub token_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayRequest {
    pub payer: String,
    pub amount: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Acknowledge {
    pub txn_id: String,
    pub accept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisputeOpen {
    pub txn_id: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisputeResolve {
    pub txn_id: String,
    pub outcome: DisputeOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
}

// ---------------------------------------------------------------------------
// Browser credential shapes

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct BrowserAttestation {
    raw_id: String,
    response: BrowserAttestationResponse,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct BrowserAttestationResponse {
    #[serde(rename = "clientDataJSON")]
    client_data_json: String,
    authenticator_data: String,
    /// SubjectPublicKeyInfo DER from `getPublicKey()`.
    public_key: String,
    public_key_algorithm: i64,
    /// `attStmt.sig` of a packed self-attestation.
    attestation_signature: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct BrowserAssertion {
    raw_id: String,
    response: BrowserAssertionResponse,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct BrowserAssertionResponse {
    #[serde(rename = "clientDataJSON")]
    client_data_json: String,
    authenticator_data: String,
    signature: String,
}

fn bytes(field: &str, s: &str) -> Result<Vec<u8>, String> {
    b64::decode(s).ok_or_else(|| format!("{field} is not base64url"))
}

pub fn decode_registration(format: Format, v: Value) -> Result<MakeCredentialResponse, String> {
    match format {
        Format::Pp2pp => serde_json::from_value(v).map_err(|e| e.to_string()),
        Format::Webauthn => {
            let b: BrowserAttestation = serde_json::from_value(v).map_err(|e| e.to_string())?;
            if b.response.public_key_algorithm != COSE_RS256 {
                return Err(format!(
                    "unsupported algorithm {}",
                    b.response.public_key_algorithm
                ));
            }
            let credential_id = bytes("rawId", &b.raw_id)?;
            Ok(MakeCredentialResponse {
                credential_id: credential_id.clone(),
                public_key: bytes("publicKey", &b.response.public_key)?,
                attestation: AssertionResponse {
                    credential_id,
                    authenticator_data: bytes("authenticatorData", &b.response.authenticator_data)?,
                    client_data: bytes("clientDataJSON", &b.response.client_data_json)?,
                    signature: bytes("attestationSignature", &b.response.attestation_signature)?,
                },
            })
        }
    }
}

pub fn decode_assertion(format: Format, v: Value) -> Result<AssertionResponse, String> {
    match format {
        Format::Pp2pp => serde_json::from_value(v).map_err(|e| e.to_string()),
        Format::Webauthn => {
            let b: BrowserAssertion = serde_json::from_value(v).map_err(|e| e.to_string())?;
            Ok(AssertionResponse {
                credential_id: bytes("rawId", &b.raw_id)?,
                authenticator_data: bytes("authenticatorData", &b.response.authenticator_data)?,
                client_data: bytes("clientDataJSON", &b.response.client_data_json)?,
                signature: bytes("signature", &b.response.signature)?,
            })
        }
    }
}

/// Encode `a` in the browser shape; used by contract tests.
pub fn assertion_as_webauthn(a: &AssertionResponse) -> Value {
    serde_json::json!({
        "id": b64::encode(&a.credential_id),
        "rawId": b64::encode(&a.credential_id),
        "type": "public-key",
        "response": {
            "clientDataJSON": b64::encode(&a.client_data),
            "authenticatorData": b64::encode(&a.authenticator_data),
            "signature": b64::encode(&a.signature),
        }
    })
}

/// Encode `r` in the browser shape; used by contract tests.
pub fn registration_as_webauthn(r: &MakeCredentialResponse) -> Value {
    serde_json::json!({
        "id": b64::encode(&r.credential_id),
        "rawId": b64::encode(&r.credential_id),
        "type": "public-key",
        "response": {
            "clientDataJSON": b64::encode(&r.attestation.client_data),
            "authenticatorData": b64::encode(&r.attestation.authenticator_data),
            "publicKey": b64::encode(&r.public_key),
            "publicKeyAlgorithm": COSE_RS256,
            "attestationSignature": b64::encode(&r.attestation.signature),
        }
    })
}
