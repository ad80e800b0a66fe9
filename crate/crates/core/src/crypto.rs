//! Cryptographic primitives.
//!
//! * RSA-2048 authentication keypairs, RSASSA-PKCS1-v1_5 over SHA-256.
//! * 16-byte single-use challenges.
//! * AES-GCM sealing: AES-256 under the cookie key (sessions, one-time
//!   links) and AES-128 under the application key (payment tokens and the
//!   pre-auth username cookie).
//! * UUID v4 authentication tokens.
//!
//! Binary values that leave the process are encoded base64url without
//! padding (see [`b64`]).

use std::fmt;
use std::fs;
use std::io::Write;
use std::net::IpAddr;
use std::path::Path;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Aes256Gcm, Nonce};
use crypto_bigint::{nlimbs, Encoding, U1024};
use crypto_primes::hazmat::{random_odd_uint, Sieve};
use crypto_primes::is_prime_with_rng;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::traits::{PrivateKeyParts, PublicKeyParts};
use rsa::{BigUint, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::clock::{Clock, Millis};

pub const RSA_BITS: usize = 2048;
pub const SIGNATURE_LEN: usize = RSA_BITS / 8;
pub const CHALLENGE_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const DEFAULT_CHALLENGE_TTL_MS: u64 = 120_000;

/// Associated data for one-time login links.
pub const LINK_AD: &[u8] = b"onetime-link";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("entropy source unavailable")]
    EntropyUnavailable,
    #[error("authentication failure")]
    AuthFailure,
    #[error("refusing to sign an empty message")]
    EmptyMessage,
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("key file: {0}")]
    KeyFile(String),
}

pub mod b64 {
    //! base64url without padding, plus serde adapters for byte fields.
    use base64::engine::general_purpose::URL_SAFE_NO_PAD;
    use base64::Engine;

    pub fn encode(bytes: impl AsRef<[u8]>) -> String {
        URL_SAFE_NO_PAD.encode(bytes)
    }

    pub fn decode(s: &str) -> Option<Vec<u8>> {
        URL_SAFE_NO_PAD.decode(s.trim()).ok()
    }

    pub fn serialize<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s: String = serde::Deserialize::deserialize(d)?;
        decode(&s).ok_or_else(|| serde::de::Error::custom("invalid base64url"))
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Constant-time byte comparison for secrets of equal public length.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn fill_random(buf: &mut [u8]) -> Result<(), CryptoError> {
    OsRng
        .try_fill_bytes(buf)
        .map_err(|_| CryptoError::EntropyUnavailable)
}

// ---------------------------------------------------------------------------
// RSA

/// An RSA-2048 authentication keypair.
#[derive(Clone)]
pub struct AuthKeyPair {
    private: RsaPrivateKey,
    public: AuthPublicKey,
}

impl fmt::Debug for AuthKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuthKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

const RSA_EXPONENT: u32 = 65_537;

/// A random 1024-bit prime with its top two bits set, so that the product
/// of two is exactly 2048 bits.
fn rsa_prime<R: CryptoRng + RngCore>(rng: &mut R) -> BigUint {
    let half = RSA_BITS / 2;
    loop {
        let start = random_odd_uint::<{ nlimbs!(1024) }>(rng, half) | (U1024::ONE << (half - 2));
        if let Some(p) = Sieve::new(&start, half, false).find(|c| is_prime_with_rng(rng, c)) {
            return BigUint::from_bytes_be(&p.to_be_bytes());
        }
    }
}

impl AuthKeyPair {
    pub fn generate<R: CryptoRng + RngCore>(rng: &mut R) -> Result<Self, CryptoError> {
        let mut probe = [0u8; 8];
        rng.try_fill_bytes(&mut probe)
            .map_err(|_| CryptoError::EntropyUnavailable)?;
        let e = BigUint::from(RSA_EXPONENT);
        loop {
            let p = rsa_prime(rng);
            let q = rsa_prime(rng);
            if let Ok(private) = RsaPrivateKey::from_p_q(p, q, e.clone()) {
                if private.n().bits() == RSA_BITS {
                    return Ok(Self::from_private(private));
                }
            }
        }
    }

    pub fn from_private(private: RsaPrivateKey) -> Self {
        let public = AuthPublicKey(private.to_public_key());
        Self { private, public }
    }

    pub fn from_pkcs8_der(der: &[u8]) -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::from_pkcs8_der(der)
            .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        if private.size() != SIGNATURE_LEN {
            return Err(CryptoError::InvalidKey("modulus is not 2048 bits".into()));
        }
        Ok(Self::from_private(private))
    }

    pub fn from_pkcs8_pem(pem: &str) -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::from_pkcs8_pem(pem)
            .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        Ok(Self::from_private(private))
    }

    pub fn to_pkcs8_der(&self) -> Vec<u8> {
        self.private
            .to_pkcs8_der()
            .map(|doc| doc.as_bytes().to_vec())
            .expect("RSA private key encodes")
    }

    pub fn public(&self) -> &AuthPublicKey {
        &self.public
    }

    pub fn private(&self) -> &RsaPrivateKey {
        &self.private
    }

    /// Big-endian private exponent; exposed for key-confinement checks.
    pub fn private_exponent_be(&self) -> Vec<u8> {
        self.private.d().to_bytes_be()
    }

    pub fn sign(&self, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
        sign(&self.private, message)
    }
}

/// RSASSA-PKCS1-v1_5 / SHA-256. Output is always 256 bytes.
pub fn sign(private_key: &RsaPrivateKey, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if message.is_empty() {
        return Err(CryptoError::EmptyMessage);
    }
    let signer = SigningKey::<Sha256>::new(private_key.clone());
    let sig = signer
        .try_sign(message)
        .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
    Ok(sig.to_vec())
}

/// Total: malformed signatures verify as `false`.
pub fn verify(public_key: &AuthPublicKey, message: &[u8], signature: &[u8]) -> bool {
    if signature.len() != SIGNATURE_LEN {
        return false;
    }
    let Ok(sig) = Signature::try_from(signature) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(public_key.0.clone())
        .verify(message, &sig)
        .is_ok()
}

/// RSA-2048 public key; wire form is SubjectPublicKeyInfo DER.
#[derive(Clone, PartialEq, Eq)]
pub struct AuthPublicKey(RsaPublicKey);

impl fmt::Debug for AuthPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.n().to_bytes_be();
        write!(f, "AuthPublicKey(n={}..)", hex_prefix(&n))
    }
}

fn hex_prefix(b: &[u8]) -> String {
    b.iter().take(6).map(|x| format!("{x:02x}")).collect()
}

impl AuthPublicKey {
    pub fn to_der(&self) -> Vec<u8> {
        self.0
            .to_public_key_der()
            .map(|d| d.as_bytes().to_vec())
            .expect("RSA public key encodes")
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        let key = RsaPublicKey::from_public_key_der(der)
            .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        if key.size() != SIGNATURE_LEN {
            return Err(CryptoError::InvalidKey("modulus is not 2048 bits".into()));
        }
        Ok(Self(key))
    }

    pub fn modulus_be(&self) -> Vec<u8> {
        self.0.n().to_bytes_be()
    }

    pub fn exponent_be(&self) -> Vec<u8> {
        self.0.e().to_bytes_be()
    }

    pub fn bits(&self) -> usize {
        self.0.n().bits()
    }
}

// ---------------------------------------------------------------------------
// Challenges

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ceremony {
    Registration,
    Authentication,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    #[serde(with = "nonce16")]
    pub nonce: [u8; CHALLENGE_LEN],
    pub ceremony: Ceremony,
    pub user_ref: String,
    pub issued_at: Millis,
    pub ttl_ms: u64,
}

mod nonce16 {
    use super::{b64, CHALLENGE_LEN};
    pub fn serialize<S: serde::Serializer>(n: &[u8; CHALLENGE_LEN], s: S) -> Result<S::Ok, S::Error> {
        b64::serialize(n, s)
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<[u8; CHALLENGE_LEN], D::Error> {
        let v = b64::deserialize(d)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("challenge must be 16 bytes"))
    }
}

impl Challenge {
    pub fn expires_at(&self) -> Millis {
        self.issued_at.saturating_add(self.ttl_ms)
    }

    pub fn is_expired(&self, now: Millis) -> bool {
        now >= self.expires_at()
    }

    pub fn nonce_b64(&self) -> String {
        b64::encode(self.nonce)
    }
}

pub fn new_challenge(
    ceremony: Ceremony,
    user_ref: &str,
    clock: &dyn Clock,
) -> Result<Challenge, CryptoError> {
    new_challenge_with_ttl(ceremony, user_ref, clock, DEFAULT_CHALLENGE_TTL_MS)
}

pub fn new_challenge_with_ttl(
    ceremony: Ceremony,
    user_ref: &str,
    clock: &dyn Clock,
    ttl_ms: u64,
) -> Result<Challenge, CryptoError> {
    let mut nonce = [0u8; CHALLENGE_LEN];
    fill_random(&mut nonce)?;
    Ok(Challenge {
        nonce,
        ceremony,
        user_ref: user_ref.to_owned(),
        issued_at: clock.now_ms(),
        ttl_ms,
    })
}

// ---------------------------------------------------------------------------
// Symmetric keys and sealing

/// 256-bit key for session cookies and one-time links.
#[derive(Clone, PartialEq, Eq)]
pub struct CookieKey([u8; 32]);

/// 128-bit application key for server-side sealed payloads.
#[derive(Clone, PartialEq, Eq)]
pub struct AppKey([u8; 16]);

impl fmt::Debug for CookieKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CookieKey(..)")
    }
}

impl fmt::Debug for AppKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AppKey(..)")
    }
}

impl CookieKey {
    pub fn from_bytes(b: [u8; 32]) -> Self {
        Self(b)
    }
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl AppKey {
    pub fn from_bytes(b: [u8; 16]) -> Self {
        Self(b)
    }
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

/// A key usable with [`seal`] / [`open`].
pub trait SealKey {
    fn encrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Vec<u8>;
    fn decrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Option<Vec<u8>>;
}

impl SealKey for CookieKey {
    fn encrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Vec<u8> {
        Aes256Gcm::new(&self.0.into())
            .encrypt(Nonce::from_slice(nonce), payload)
            .expect("AES-GCM encryption of in-memory buffer")
    }
    fn decrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Option<Vec<u8>> {
        Aes256Gcm::new(&self.0.into())
            .decrypt(Nonce::from_slice(nonce), payload)
            .ok()
    }
}

impl SealKey for AppKey {
    fn encrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Vec<u8> {
        Aes128Gcm::new(&self.0.into())
            .encrypt(Nonce::from_slice(nonce), payload)
            .expect("AES-GCM encryption of in-memory buffer")
    }
    fn decrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Option<Vec<u8>> {
        Aes128Gcm::new(&self.0.into())
            .decrypt(Nonce::from_slice(nonce), payload)
            .ok()
    }
}

/// Raw 256-bit key, used for the card file.
pub(crate) struct RawKey256(pub [u8; 32]);

impl SealKey for RawKey256 {
    fn encrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Vec<u8> {
        CookieKey(self.0).encrypt(nonce, payload)
    }
    fn decrypt(&self, nonce: &[u8; NONCE_LEN], payload: Payload<'_, '_>) -> Option<Vec<u8>> {
        CookieKey(self.0).decrypt(nonce, payload)
    }
}

/// AEAD output. Wire form is `nonce ‖ ciphertext ‖ tag`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(CryptoError::AuthFailure);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ct, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("split length"),
            ciphertext: ct.to_vec(),
            tag: tag.try_into().expect("split length"),
        })
    }

    pub fn to_b64(&self) -> String {
        b64::encode(self.to_bytes())
    }

    pub fn from_b64(s: &str) -> Result<Self, CryptoError> {
        let bytes = b64::decode(s).ok_or(CryptoError::AuthFailure)?;
        Self::from_bytes(&bytes)
    }
}

/// Seal under a fresh random 96-bit nonce.
pub fn seal<K: SealKey + ?Sized>(
    key: &K,
    plaintext: &[u8],
    associated_data: &[u8],
) -> Result<SealedBlob, CryptoError> {
    let mut nonce = [0u8; NONCE_LEN];
    fill_random(&mut nonce)?;
    Ok(seal_with_nonce(key, nonce, plaintext, associated_data))
}

pub(crate) fn seal_with_nonce<K: SealKey + ?Sized>(
    key: &K,
    nonce: [u8; NONCE_LEN],
    plaintext: &[u8],
    associated_data: &[u8],
) -> SealedBlob {
    let mut ct = key.encrypt(
        &nonce,
        Payload {
            msg: plaintext,
            aad: associated_data,
        },
    );
    let tag: [u8; TAG_LEN] = ct[ct.len() - TAG_LEN..].try_into().expect("tag length");
    ct.truncate(ct.len() - TAG_LEN);
    SealedBlob {
        nonce,
        ciphertext: ct,
        tag,
    }
}

pub fn open<K: SealKey + ?Sized>(
    key: &K,
    blob: &SealedBlob,
    associated_data: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let mut ct = Vec::with_capacity(blob.ciphertext.len() + TAG_LEN);
    ct.extend_from_slice(&blob.ciphertext);
    ct.extend_from_slice(&blob.tag);
    key.decrypt(
        &blob.nonce,
        Payload {
            msg: &ct,
            aad: associated_data,
        },
    )
    .ok_or(CryptoError::AuthFailure)
}

// ---------------------------------------------------------------------------
// Tokens and one-time links

pub fn new_auth_token() -> Uuid {
    Uuid::new_v4()
}

fn encode_ip(ip: IpAddr, out: &mut Vec<u8>) {
    match ip {
        IpAddr::V4(v4) => {
            out.push(4);
            out.extend_from_slice(&v4.octets());
        }
        IpAddr::V6(v6) => {
            out.push(6);
            out.extend_from_slice(&v6.octets());
        }
    }
}

fn decode_ip(bytes: &[u8]) -> Option<IpAddr> {
    match bytes.split_first()? {
        (4, rest) => <[u8; 4]>::try_from(rest).ok().map(IpAddr::from),
        (6, rest) => <[u8; 16]>::try_from(rest).ok().map(IpAddr::from),
        _ => None,
    }
}

/// Plaintext is `uuid(16) ‖ family(1: 4|6) ‖ ip octets`.
pub fn make_link_payload(
    token: Uuid,
    requester_ip: IpAddr,
    key: &CookieKey,
) -> Result<String, CryptoError> {
    let mut pt = token.as_bytes().to_vec();
    encode_ip(requester_ip, &mut pt);
    Ok(seal(key, &pt, LINK_AD)?.to_b64())
}

pub fn open_link_payload(payload: &str, key: &CookieKey) -> Result<(Uuid, IpAddr), CryptoError> {
    let blob = SealedBlob::from_b64(payload)?;
    let pt = open(key, &blob, LINK_AD)?;
    if pt.len() < 17 {
        return Err(CryptoError::AuthFailure);
    }
    let token = Uuid::from_slice(&pt[..16]).map_err(|_| CryptoError::AuthFailure)?;
    let ip = decode_ip(&pt[16..]).ok_or(CryptoError::AuthFailure)?;
    Ok((token, ip))
}

// ---------------------------------------------------------------------------
// Key file

pub const KEYFILE_LEN: usize = 48;

/// Server symmetric keys: `cookie_key(32) ‖ app_key(16)` on disk.
#[derive(Debug, Clone)]
pub struct ServerKeys {
    pub cookie_key: CookieKey,
    pub app_key: AppKey,
}

impl ServerKeys {
    pub fn generate() -> Result<Self, CryptoError> {
        let mut buf = [0u8; KEYFILE_LEN];
        fill_random(&mut buf)?;
        Ok(Self::from_bytes(&buf))
    }

    pub fn from_bytes(buf: &[u8; KEYFILE_LEN]) -> Self {
        Self {
            cookie_key: CookieKey(buf[..32].try_into().expect("32")),
            app_key: AppKey(buf[32..].try_into().expect("16")),
        }
    }

    pub fn to_bytes(&self) -> [u8; KEYFILE_LEN] {
        let mut buf = [0u8; KEYFILE_LEN];
        buf[..32].copy_from_slice(&self.cookie_key.0);
        buf[32..].copy_from_slice(&self.app_key.0);
        buf
    }

    /// Load the key file, creating it (mode 0600) on first boot.
    pub fn load_or_create(path: &Path) -> Result<Self, CryptoError> {
        let err = |e: std::io::Error| CryptoError::KeyFile(format!("{}: {e}", path.display()));
        match fs::read(path) {
            Ok(bytes) => {
                let buf: [u8; KEYFILE_LEN] = bytes.as_slice().try_into().map_err(|_| {
                    CryptoError::KeyFile(format!(
                        "{}: expected {KEYFILE_LEN} bytes, found {}",
                        path.display(),
                        bytes.len()
                    ))
                })?;
                Ok(Self::from_bytes(&buf))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let keys = Self::generate()?;
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(err)?;
                }
                let mut opts = fs::OpenOptions::new();
                opts.write(true).create_new(true);
                #[cfg(unix)]
                {
                    use std::os::unix::fs::OpenOptionsExt;
                    opts.mode(0o600);
                }
                let mut f = opts.open(path).map_err(err)?;
                f.write_all(&keys.to_bytes()).map_err(err)?;
                f.sync_all().map_err(err)?;
                Ok(keys)
            }
            Err(e) => Err(err(e)),
        }
    }
}
