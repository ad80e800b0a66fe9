//! C ABI over the software card and the crypto primitives.
//!
//! Every function returns a [`Pp2ppStatus`]; on failure a message is
//! available from [`pp2pp_last_error`] on the same thread. Strings and
//! byte buffers handed out by this library must be released with
//! [`pp2pp_string_free`] / [`pp2pp_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pp2pp::authenticator::{Card, CardError};
use pp2pp::crypto::{self, AppKey, AuthPublicKey, CookieKey, CryptoError, SealedBlob};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pp2ppStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    BadPassphrase = 5,
    CorruptCard = 6,
    CardLocked = 7,
    AuthFailure = 8,
    BadSignature = 9,
    Crypto = 10,
    Panic = 99,
}

/// Opaque software card.
pub struct Pp2ppCard {
    inner: Card,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(Pp2ppStatus, String);

impl From<CardError> for Fail {
    fn from(e: CardError) -> Self {
        let s = match e {
            CardError::Io(_) => Pp2ppStatus::Io,
            CardError::BadPassphrase => Pp2ppStatus::BadPassphrase,
            CardError::CorruptCardFile => Pp2ppStatus::CorruptCard,
            CardError::CardLocked => Pp2ppStatus::CardLocked,
            _ => Pp2ppStatus::Crypto,
        };
        Fail(s, e.to_string())
    }
}

impl From<CryptoError> for Fail {
    fn from(e: CryptoError) -> Self {
        let s = match e {
            CryptoError::AuthFailure => Pp2ppStatus::AuthFailure,
            CryptoError::InvalidKey(_) => Pp2ppStatus::InvalidArgument,
            _ => Pp2ppStatus::Crypto,
        };
        Fail(s, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Pp2ppStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Pp2ppStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside pp2pp");
            Pp2ppStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail(Pp2ppStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(Pp2ppStatus::InvalidUtf8, "argument is not UTF-8".into()))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null()),
        (false, n) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

unsafe fn card_arg<'a>(p: *mut Pp2ppCard) -> Result<&'a mut Card, Fail> {
    p.as_mut().map(|c| &mut c.inner).ok_or_else(null)
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    let c = CString::new(s).map_err(|_| Fail(Pp2ppStatus::Crypto, "interior NUL".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn out_bytes(v: Vec<u8>, out: *mut *mut u8, out_len: *mut usize) -> Result<(), Fail> {
    if out.is_null() || out_len.is_null() {
        return Err(null());
    }
    let b = v.into_boxed_slice();
    unsafe {
        *out_len = b.len();
        *out = Box::into_raw(b) as *mut u8;
    }
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pp2pp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `p`/`len` must be NULL or a buffer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_bytes_free(p: *mut u8, len: usize) {
    if !p.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, len)));
    }
}

/// Create a card whose user-verification PIN is `pin`.
///
/// # Safety
/// `pin` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_card_new(pin: *const c_char, out: *mut *mut Pp2ppCard) -> Pp2ppStatus {
    guard(|| {
        let pin = str_arg(pin)?;
        if out.is_null() {
            return Err(null());
        }
        *out = Box::into_raw(Box::new(Pp2ppCard { inner: Card::new(pin) }));
        Ok(())
    })
}

/// # Safety
/// `path` and `passphrase` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_card_import(
    path: *const c_char,
    passphrase: *const c_char,
    out: *mut *mut Pp2ppCard,
) -> Pp2ppStatus {
    guard(|| {
        let path = str_arg(path)?;
        let pass = str_arg(passphrase)?;
        if out.is_null() {
            return Err(null());
        }
        let inner = Card::import(Path::new(path), pass)?;
        *out = Box::into_raw(Box::new(Pp2ppCard { inner }));
        Ok(())
    })
}

/// Write the card, encrypted under `passphrase`, with mode 0600.
///
/// # Safety
/// `card` must come from this library; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_card_export(
    card: *mut Pp2ppCard,
    path: *const c_char,
    passphrase: *const c_char,
) -> Pp2ppStatus {
    guard(|| {
        let card = card_arg(card)?;
        card.export(Path::new(str_arg(path)?), str_arg(passphrase)?)?;
        Ok(())
    })
}

/// Card identifier as a newly allocated string.
///
/// # Safety
/// `card` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_card_id(card: *mut Pp2ppCard, out: *mut *mut c_char) -> Pp2ppStatus {
    guard(|| {
        let id = card_arg(card)?.card_id().to_owned();
        out_string(id, out)
    })
}

/// Handle one JSON CTAP request (`{"op":"get_info"}`,
/// `{"op":"make_credential",...}`, `{"op":"get_assertion",...}`).
/// Card-level refusals come back as `{"status":"error",...}` with
/// `Pp2ppStatus::Ok`.
///
/// # Safety
/// `card` must come from this library; `request` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_card_handle_json(
    card: *mut Pp2ppCard,
    request: *const c_char,
    out: *mut *mut c_char,
) -> Pp2ppStatus {
    guard(|| {
        let card = card_arg(card)?;
        let req = str_arg(request)?;
        out_string(card.handle_json(req), out)
    })
}

/// # Safety
/// `card` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_card_free(card: *mut Pp2ppCard) {
    if !card.is_null() {
        drop(Box::from_raw(card));
    }
}

/// Check an RSA-2048 PKCS#1 v1.5 SHA-256 signature against a DER
/// SubjectPublicKeyInfo. `Ok` or `BadSignature`.
///
/// # Safety
/// Each pointer must reference at least its length in bytes.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_verify(
    spki_der: *const u8,
    spki_len: usize,
    msg: *const u8,
    msg_len: usize,
    sig: *const u8,
    sig_len: usize,
) -> Pp2ppStatus {
    guard(|| {
        let key = AuthPublicKey::from_der(bytes_arg(spki_der, spki_len)?)?;
        if crypto::verify(&key, bytes_arg(msg, msg_len)?, bytes_arg(sig, sig_len)?) {
            Ok(())
        } else {
            Err(Fail(Pp2ppStatus::BadSignature, "signature does not verify".into()))
        }
    })
}

/// SHA-256 of `data` into the 32-byte buffer `out`.
///
/// # Safety
/// `data` must reference `len` bytes; `out` 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_sha256(data: *const u8, len: usize, out: *mut u8) -> Pp2ppStatus {
    guard(|| {
        let d = crypto::sha256(bytes_arg(data, len)?);
        if out.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping(d.as_ptr(), out, d.len());
        Ok(())
    })
}

enum Key {
    Cookie(CookieKey),
    App(AppKey),
}

unsafe fn key_arg(key: *const u8, len: usize) -> Result<Key, Fail> {
    let k = bytes_arg(key, len)?;
    match len {
        32 => Ok(Key::Cookie(CookieKey::from_bytes(k.try_into().expect("32")))),
        16 => Ok(Key::App(AppKey::from_bytes(k.try_into().expect("16")))),
        _ => Err(Fail(Pp2ppStatus::InvalidArgument, format!("key must be 16 or 32 bytes, got {len}"))),
    }
}

/// AES-GCM seal (AES-128 for 16-byte keys, AES-256 for 32-byte keys).
/// Output is `nonce || ciphertext || tag`.
///
/// # Safety
/// Input pointers must reference their lengths; `out`/`out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_seal(
    key: *const u8,
    key_len: usize,
    plaintext: *const u8,
    plaintext_len: usize,
    ad: *const u8,
    ad_len: usize,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> Pp2ppStatus {
    guard(|| {
        let pt = bytes_arg(plaintext, plaintext_len)?;
        let ad = bytes_arg(ad, ad_len)?;
        let blob = match key_arg(key, key_len)? {
            Key::Cookie(k) => crypto::seal(&k, pt, ad)?,
            Key::App(k) => crypto::seal(&k, pt, ad)?,
        };
        out_bytes(blob.to_bytes(), out, out_len)
    })
}

/// Inverse of [`pp2pp_seal`]; `AuthFailure` on any tampering.
///
/// # Safety
/// Input pointers must reference their lengths; `out`/`out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn pp2pp_open(
    key: *const u8,
    key_len: usize,
    sealed: *const u8,
    sealed_len: usize,
    ad: *const u8,
    ad_len: usize,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> Pp2ppStatus {
    guard(|| {
        let blob = SealedBlob::from_bytes(bytes_arg(sealed, sealed_len)?)?;
        let ad = bytes_arg(ad, ad_len)?;
        let pt = match key_arg(key, key_len)? {
            Key::Cookie(k) => crypto::open(&k, &blob, ad)?,
            Key::App(k) => crypto::open(&k, &blob, ad)?,
        };
        out_bytes(pt, out, out_len)
    })
}
