//! Software smart card.
//!
//! Holds RSA private keys that never leave it, refuses to sign for any RP ID
//! it has no credential for (`InvalidDomain`), gates every signature behind a
//! simulated user-verification secret, and persists itself as a sealed card
//! file.
//!
//! Authenticator data follows the WebAuthn layout:
//! `rp_id_hash(32) ‖ flags(1) ‖ sign_count(4, big-endian)`, and signatures
//! cover `authenticator_data ‖ SHA-256(client_data)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, b64, sha256, AuthKeyPair, CryptoError, RawKey256, SealedBlob};

pub const CARD_MAGIC: &[u8; 10] = b"PP2PPCARD1";
pub const CREDENTIAL_ID_LEN: usize = 32;
pub const AUTH_DATA_LEN: usize = 37;
pub const FLAG_UP: u8 = 0x01;
pub const FLAG_UV: u8 = 0x04;
pub const CLIENT_DATA_CREATE: &str = "webauthn.create";
pub const CLIENT_DATA_GET: &str = "webauthn.get";
/// Consecutive failed verifications before the card locks itself.
pub const MAX_UV_FAILURES: u32 = 8;
const KDF_ROUNDS: u32 = 100_000;
const SALT_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CardError {
    #[error("user verification failed")]
    UserVerificationFailed,
    #[error("card locked")]
    CardLocked,
    #[error("invalid domain: no credential for this relying party")]
    InvalidDomain,
    #[error("client data does not carry the requested challenge")]
    ClientDataMismatch,
    #[error("sign counter exhausted")]
    CounterExhausted,
    #[error("bad passphrase")]
    BadPassphrase,
    #[error("corrupt card file")]
    CorruptCardFile,
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl CardError {
    pub fn code(&self) -> &'static str {
        match self {
            CardError::UserVerificationFailed => "user_verification_failed",
            CardError::CardLocked => "card_locked",
            CardError::InvalidDomain => "invalid_domain",
            CardError::ClientDataMismatch => "client_data_mismatch",
            CardError::CounterExhausted => "counter_exhausted",
            CardError::BadPassphrase => "bad_passphrase",
            CardError::CorruptCardFile => "corrupt_card_file",
            CardError::BadRequest(_) => "bad_request",
            CardError::Io(_) => "io",
            CardError::Crypto(_) => "crypto",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthenticatorData {
    pub rp_id_hash: [u8; 32],
    pub flags: u8,
    pub sign_count: u32,
}

impl AuthenticatorData {
    pub fn new(rp_id: &str, flags: u8, sign_count: u32) -> Self {
        Self {
            rp_id_hash: sha256(rp_id.as_bytes()),
            flags,
            sign_count,
        }
    }

    pub fn to_bytes(&self) -> [u8; AUTH_DATA_LEN] {
        let mut out = [0u8; AUTH_DATA_LEN];
        out[..32].copy_from_slice(&self.rp_id_hash);
        out[32] = self.flags;
        out[33..].copy_from_slice(&self.sign_count.to_be_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != AUTH_DATA_LEN {
            return None;
        }
        Some(Self {
            rp_id_hash: bytes[..32].try_into().ok()?,
            flags: bytes[32],
            sign_count: u32::from_be_bytes(bytes[33..].try_into().ok()?),
        })
    }

    /// Parse the fixed 37-byte head, ignoring any attested credential data
    /// or extensions that follow.
    pub fn parse_prefix(bytes: &[u8]) -> Option<Self> {
        Self::parse(bytes.get(..AUTH_DATA_LEN)?)
    }

    pub fn user_present(&self) -> bool {
        self.flags & FLAG_UP != 0
    }

    pub fn user_verified(&self) -> bool {
        self.flags & FLAG_UV != 0
    }
}

/// Collected client data, serialized as JSON and hashed into the signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientData {
    #[serde(rename = "type")]
    pub kind: String,
    /// base64url of the 16-byte challenge.
    pub challenge: String,
    pub origin: String,
}

impl ClientData {
    pub fn new(kind: &str, challenge: &[u8], origin: &str) -> Self {
        Self {
            kind: kind.to_owned(),
            challenge: b64::encode(challenge),
            origin: origin.to_owned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("client data serializes")
    }

    pub fn parse(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResponse {
    #[serde(with = "b64")]
    pub credential_id: Vec<u8>,
    #[serde(with = "b64")]
    pub authenticator_data: Vec<u8>,
    #[serde(with = "b64")]
    pub client_data: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

impl AssertionResponse {
    /// The bytes the signature covers.
    pub fn signed_message(&self) -> Vec<u8> {
        signed_message(&self.authenticator_data, &self.client_data)
    }
}

pub fn signed_message(authenticator_data: &[u8], client_data: &[u8]) -> Vec<u8> {
    let mut m = authenticator_data.to_vec();
    m.extend_from_slice(&sha256(client_data));
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MakeCredentialResponse {
    #[serde(with = "b64")]
    pub credential_id: Vec<u8>,
    /// SubjectPublicKeyInfo DER.
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    /// Self-attestation: the new key signing the registration challenge.
    pub attestation: AssertionResponse,
}

#[derive(Clone)]
pub struct Credential {
    pub credential_id: [u8; CREDENTIAL_ID_LEN],
    keypair: AuthKeyPair,
    pub sign_count: u32,
}

impl std::fmt::Debug for Credential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credential")
            .field("credential_id", &b64::encode(self.credential_id))
            .field("sign_count", &self.sign_count)
            .finish_non_exhaustive()
    }
}

impl Credential {
    pub fn public_key_der(&self) -> Vec<u8> {
        self.keypair.public().to_der()
    }

    /// Private exponent bytes, for leak scanning in tests only.
    #[doc(hidden)]
    pub fn private_exponent_be(&self) -> Vec<u8> {
        self.keypair.private_exponent_be()
    }
}

/// The card. Methods take `&mut self`, so counter update and signing are
/// one exclusive step; share across threads behind a `Mutex`.
#[derive(Debug, Clone)]
pub struct Card {
    card_id: String,
    uv_secret: String,
    failed_uv: u32,
    locked: bool,
    credentials: BTreeMap<(String, Vec<u8>), Credential>,
}

impl Card {
    pub fn new(uv_secret: &str) -> Self {
        Self {
            card_id: uuid::Uuid::new_v4().to_string(),
            uv_secret: uv_secret.to_owned(),
            failed_uv: 0,
            locked: false,
            credentials: BTreeMap::new(),
        }
    }

    pub fn card_id(&self) -> &str {
        &self.card_id
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn credential_count(&self) -> usize {
        self.credentials.len()
    }

    pub fn credential(&self, rp_id: &str, user_handle: &[u8]) -> Option<&Credential> {
        self.credentials.get(&(rp_id.to_owned(), user_handle.to_vec()))
    }

    /// `(rp_id, user_handle)` pairs held by the card.
    pub fn credential_keys(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.credentials
            .keys()
            .map(|(rp, user)| (rp.as_str(), user.as_slice()))
    }

    fn check_uv(&mut self, uv_input: &str) -> Result<(), CardError> {
        if self.locked {
            return Err(CardError::CardLocked);
        }
        if crypto::ct_eq(&sha256(uv_input.as_bytes()), &sha256(self.uv_secret.as_bytes())) {
            self.failed_uv = 0;
            Ok(())
        } else {
            self.failed_uv += 1;
            if self.failed_uv >= MAX_UV_FAILURES {
                self.locked = true;
            }
            Err(CardError::UserVerificationFailed)
        }
    }

    /// Generate a fresh keypair for `(rp_id, user_handle)` and self-attest
    /// the registration challenge with it. An existing credential for the
    /// same pair is replaced.
    pub fn make_credential(
        &mut self,
        rp_id: &str,
        user_handle: &[u8],
        challenge: &[u8],
        uv_input: &str,
    ) -> Result<MakeCredentialResponse, CardError> {
        self.check_uv(uv_input)?;
        if rp_id.is_empty() {
            return Err(CardError::BadRequest("empty rp_id".into()));
        }
        let keypair = AuthKeyPair::generate(&mut OsRng)?;
        let mut credential_id = [0u8; CREDENTIAL_ID_LEN];
        OsRng
            .try_fill_bytes(&mut credential_id)
            .map_err(|_| CryptoError::EntropyUnavailable)?;

        let auth_data = AuthenticatorData::new(rp_id, FLAG_UP | FLAG_UV, 0).to_bytes();
        let client_data =
            ClientData::new(CLIENT_DATA_CREATE, challenge, &format!("https://{rp_id}")).to_bytes();
        let signature = keypair.sign(&signed_message(&auth_data, &client_data))?;

        let response = MakeCredentialResponse {
            credential_id: credential_id.to_vec(),
            public_key: keypair.public().to_der(),
            attestation: AssertionResponse {
                credential_id: credential_id.to_vec(),
                authenticator_data: auth_data.to_vec(),
                client_data,
                signature,
            },
        };
        self.credentials.insert(
            (rp_id.to_owned(), user_handle.to_vec()),
            Credential {
                credential_id,
                keypair,
                sign_count: 0,
            },
        );
        Ok(response)
    }

    /// Sign an authentication challenge. `rp_id` must match a stored
    /// credential exactly (case-sensitive); otherwise `InvalidDomain`.
    /// With no `user_handle`, the first credential for `rp_id` is used.
    pub fn get_assertion(
        &mut self,
        rp_id: &str,
        user_handle: Option<&[u8]>,
        challenge: &[u8],
        client_data: &[u8],
        uv_input: &str,
    ) -> Result<AssertionResponse, CardError> {
        if self.locked {
            return Err(CardError::CardLocked);
        }
        let key = self
            .credentials
            .keys()
            .find(|(rp, user)| rp == rp_id && user_handle.is_none_or(|u| u == user.as_slice()))
            .cloned()
            .ok_or(CardError::InvalidDomain)?;
        self.check_uv(uv_input)?;

        let cd = ClientData::parse(client_data).ok_or(CardError::ClientDataMismatch)?;
        if cd.challenge != b64::encode(challenge) {
            return Err(CardError::ClientDataMismatch);
        }

        let cred = self.credentials.get_mut(&key).expect("key found above");
        let next = cred
            .sign_count
            .checked_add(1)
            .ok_or(CardError::CounterExhausted)?;
        let auth_data = AuthenticatorData::new(rp_id, FLAG_UP | FLAG_UV, next).to_bytes();
        let signature = cred
            .keypair
            .sign(&signed_message(&auth_data, client_data))?;
        cred.sign_count = next;
        Ok(AssertionResponse {
            credential_id: cred.credential_id.to_vec(),
            authenticator_data: auth_data.to_vec(),
            client_data: client_data.to_vec(),
            signature,
        })
    }

    /// Test hook: overwrite a credential's counter, e.g. to simulate a
    /// cloned card replaying an older state.
    #[doc(hidden)]
    pub fn force_sign_count(&mut self, rp_id: &str, user_handle: &[u8], count: u32) -> bool {
        match self
            .credentials
            .get_mut(&(rp_id.to_owned(), user_handle.to_vec()))
        {
            Some(c) => {
                c.sign_count = count;
                true
            }
            None => false,
        }
    }

    // -- CTAP-like message interface ------------------------------------

    pub fn handle(&mut self, request: CtapRequest) -> CtapResponse {
        let result = match request {
            CtapRequest::GetInfo => Ok(CtapResponse::Info {
                card_id: self.card_id.clone(),
                credentials: self.credentials.len(),
                locked: self.locked,
            }),
            CtapRequest::MakeCredential {
                rp_id,
                user_handle,
                challenge,
                uv,
            } => self
                .make_credential(&rp_id, &user_handle, &challenge, &uv)
                .map(CtapResponse::Credential),
            CtapRequest::GetAssertion {
                rp_id,
                user_handle,
                challenge,
                client_data,
                uv,
            } => self
                .get_assertion(&rp_id, user_handle.as_deref(), &challenge, &client_data, &uv)
                .map(CtapResponse::Assertion),
        };
        result.unwrap_or_else(|e| CtapResponse::Error {
            error: e.code().to_owned(),
            message: e.to_string(),
        })
    }

    /// JSON in, JSON out. Malformed requests produce an error response.
    pub fn handle_json(&mut self, request: &str) -> String {
        let response = match serde_json::from_str::<CtapRequest>(request) {
            Ok(req) => self.handle(req),
            Err(e) => {
                let e = CardError::BadRequest(e.to_string());
                CtapResponse::Error {
                    error: e.code().to_owned(),
                    message: e.to_string(),
                }
            }
        };
        serde_json::to_string(&response).expect("response serializes")
    }

    // -- Card file ------------------------------------------------------

    /// File layout: `magic(10) ‖ salt(16) ‖ check(32) ‖ nonce(12) ‖
    /// ciphertext ‖ tag(16) ‖ sha256(everything before)(32)`.
    pub fn to_file_bytes(&self, passphrase: &str) -> Result<Vec<u8>, CardError> {
        let mut salt = [0u8; SALT_LEN];
        OsRng
            .try_fill_bytes(&mut salt)
            .map_err(|_| CryptoError::EntropyUnavailable)?;
        let (key, check) = derive_card_key(passphrase, &salt);
        let body = serde_json::to_vec(&self.to_record()).expect("card serializes");
        let mut out = Vec::with_capacity(body.len() + 128);
        out.extend_from_slice(CARD_MAGIC);
        out.extend_from_slice(&salt);
        out.extend_from_slice(&check);
        let ad = [CARD_MAGIC.as_slice(), &salt].concat();
        out.extend_from_slice(&crypto::seal(&key, &body, &ad)?.to_bytes());
        let digest = sha256(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_file_bytes(bytes: &[u8], passphrase: &str) -> Result<Self, CardError> {
        let header = CARD_MAGIC.len() + SALT_LEN + 32;
        if bytes.len() < header + crypto::NONCE_LEN + crypto::TAG_LEN + 32
            || !bytes.starts_with(CARD_MAGIC)
        {
            return Err(CardError::CorruptCardFile);
        }
        let (content, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(content) != digest {
            return Err(CardError::CorruptCardFile);
        }
        let salt = &content[CARD_MAGIC.len()..CARD_MAGIC.len() + SALT_LEN];
        let stored_check = &content[CARD_MAGIC.len() + SALT_LEN..header];
        let (key, check) = derive_card_key(passphrase, salt);
        if !crypto::ct_eq(&check, stored_check) {
            return Err(CardError::BadPassphrase);
        }
        let blob = SealedBlob::from_bytes(&content[header..]).map_err(|_| CardError::CorruptCardFile)?;
        let ad = [CARD_MAGIC.as_slice(), salt].concat();
        let body = crypto::open(&key, &blob, &ad).map_err(|_| CardError::CorruptCardFile)?;
        let record: CardRecord =
            serde_json::from_slice(&body).map_err(|_| CardError::CorruptCardFile)?;
        Self::from_record(record)
    }

    pub fn export(&self, path: &Path, passphrase: &str) -> Result<(), CardError> {
        let bytes = self.to_file_bytes(passphrase)?;
        let io = |e: std::io::Error| CardError::Io(format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn import(path: &Path, passphrase: &str) -> Result<Self, CardError> {
        let bytes = fs::read(path).map_err(|e| CardError::Io(format!("{}: {e}", path.display())))?;
        Self::from_file_bytes(&bytes, passphrase)
    }

    fn to_record(&self) -> CardRecord {
        CardRecord {
            card_id: self.card_id.clone(),
            uv_secret: self.uv_secret.clone(),
            failed_uv: self.failed_uv,
            locked: self.locked,
            credentials: self
                .credentials
                .iter()
                .map(|((rp_id, user), c)| CredentialRecord {
                    rp_id: rp_id.clone(),
                    user_handle: user.clone(),
                    credential_id: c.credential_id.to_vec(),
                    private_key: c.keypair.to_pkcs8_der(),
                    sign_count: c.sign_count,
                })
                .collect(),
        }
    }

    fn from_record(r: CardRecord) -> Result<Self, CardError> {
        let mut credentials = BTreeMap::new();
        for c in r.credentials {
            let credential_id = c
                .credential_id
                .as_slice()
                .try_into()
                .map_err(|_| CardError::CorruptCardFile)?;
            let keypair =
                AuthKeyPair::from_pkcs8_der(&c.private_key).map_err(|_| CardError::CorruptCardFile)?;
            credentials.insert(
                (c.rp_id, c.user_handle),
                Credential {
                    credential_id,
                    keypair,
                    sign_count: c.sign_count,
                },
            );
        }
        Ok(Self {
            card_id: r.card_id,
            uv_secret: r.uv_secret,
            failed_uv: r.failed_uv,
            locked: r.locked,
            credentials,
        })
    }
}

fn derive_card_key(passphrase: &str, salt: &[u8]) -> (RawKey256, [u8; 32]) {
    let mut out = [0u8; 64];
    pbkdf2::pbkdf2_hmac::<sha2::Sha256>(passphrase.as_bytes(), salt, KDF_ROUNDS, &mut out);
    let key: [u8; 32] = out[..32].try_into().expect("32");
    (RawKey256(key), sha256(&out[32..]))
}

#[derive(Serialize, Deserialize)]
struct CardRecord {
    card_id: String,
    uv_secret: String,
    failed_uv: u32,
    locked: bool,
    credentials: Vec<CredentialRecord>,
}

#[derive(Serialize, Deserialize)]
struct CredentialRecord {
    rp_id: String,
    #[serde(with = "b64")]
    user_handle: Vec<u8>,
    #[serde(with = "b64")]
    credential_id: Vec<u8>,
    #[serde(with = "b64")]
    private_key: Vec<u8>,
    sign_count: u32,
}

mod b64_opt {
    use crate::crypto::b64;
    pub fn serialize<S: serde::Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&b64::encode(b)),
            None => s.serialize_none(),
        }
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let v: Option<String> = serde::Deserialize::deserialize(d)?;
        v.map(|s| b64::decode(&s).ok_or_else(|| serde::de::Error::custom("invalid base64url")))
            .transpose()
    }
}

/// Client → card message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CtapRequest {
    GetInfo,
    MakeCredential {
        rp_id: String,
        #[serde(with = "b64")]
        user_handle: Vec<u8>,
        #[serde(with = "b64")]
        challenge: Vec<u8>,
        uv: String,
    },
    GetAssertion {
        rp_id: String,
        #[serde(default, with = "b64_opt", skip_serializing_if = "Option::is_none")]
        user_handle: Option<Vec<u8>>,
        #[serde(with = "b64")]
        challenge: Vec<u8>,
        #[serde(with = "b64")]
        client_data: Vec<u8>,
        uv: String,
    },
}

/// Card → client message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CtapResponse {
    Info {
        card_id: String,
        credentials: usize,
        locked: bool,
    },
    Credential(MakeCredentialResponse),
    Assertion(AssertionResponse),
    Error {
        error: String,
        message: String,
    },
}
