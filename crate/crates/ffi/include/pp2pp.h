#ifndef PP2PP_H
#define PP2PP_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Pp2ppStatus {
  PP2PP_STATUS_OK = 0,
  PP2PP_STATUS_NULL_POINTER = 1,
  PP2PP_STATUS_INVALID_UTF8 = 2,
  PP2PP_STATUS_INVALID_ARGUMENT = 3,
  PP2PP_STATUS_IO = 4,
  PP2PP_STATUS_BAD_PASSPHRASE = 5,
  PP2PP_STATUS_CORRUPT_CARD = 6,
  PP2PP_STATUS_CARD_LOCKED = 7,
  PP2PP_STATUS_AUTH_FAILURE = 8,
  PP2PP_STATUS_BAD_SIGNATURE = 9,
  PP2PP_STATUS_CRYPTO = 10,
  PP2PP_STATUS_PANIC = 99,
} Pp2ppStatus;

/**
 * Opaque software card.
 */
typedef struct Pp2ppCard Pp2ppCard;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *pp2pp_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void pp2pp_string_free(char *s);

/**
 * # Safety
 * `p`/`len` must be NULL or a buffer returned by this library.
 */
void pp2pp_bytes_free(uint8_t *p, size_t len);

/**
 * Create a card whose user-verification PIN is `pin`.
 *
 * # Safety
 * `pin` must be a NUL-terminated string; `out` a writable pointer.
 */
enum Pp2ppStatus pp2pp_card_new(const char *pin, struct Pp2ppCard **out);

/**
 * # Safety
 * `path` and `passphrase` must be NUL-terminated; `out` writable.
 */
enum Pp2ppStatus pp2pp_card_import(const char *path,
                                   const char *passphrase,
                                   struct Pp2ppCard **out);

/**
 * Write the card, encrypted under `passphrase`, with mode 0600.
 *
 * # Safety
 * `card` must come from this library; strings NUL-terminated.
 */
enum Pp2ppStatus pp2pp_card_export(struct Pp2ppCard *card,
                                   const char *path,
                                   const char *passphrase);

/**
 * Card identifier as a newly allocated string.
 *
 * # Safety
 * `card` must come from this library; `out` writable.
 */
enum Pp2ppStatus pp2pp_card_id(struct Pp2ppCard *card, char **out);

/**
 * Handle one JSON CTAP request (`{"op":"get_info"}`,
 * `{"op":"make_credential",...}`, `{"op":"get_assertion",...}`).
 * Card-level refusals come back as `{"status":"error",...}` with
 * `Pp2ppStatus::Ok`.
 *
 * # Safety
 * `card` must come from this library; `request` NUL-terminated; `out` writable.
 */
enum Pp2ppStatus pp2pp_card_handle_json(struct Pp2ppCard *card, const char *request, char **out);

/**
 * # Safety
 * `card` must be NULL or come from this library, and not be used again.
 */
void pp2pp_card_free(struct Pp2ppCard *card);

/**
 * Check an RSA-2048 PKCS#1 v1.5 SHA-256 signature against a DER
 * SubjectPublicKeyInfo. `Ok` or `BadSignature`.
 *
 * # Safety
 * Each pointer must reference at least its length in bytes.
 */
enum Pp2ppStatus pp2pp_verify(const uint8_t *spki_der,
                              size_t spki_len,
                              const uint8_t *msg,
                              size_t msg_len,
                              const uint8_t *sig,
                              size_t sig_len);

/**
 * SHA-256 of `data` into the 32-byte buffer `out`.
 *
 * # Safety
 * `data` must reference `len` bytes; `out` 32 writable bytes.
 */
enum Pp2ppStatus pp2pp_sha256(const uint8_t *data, size_t len, uint8_t *out);

/**
 * AES-GCM seal (AES-128 for 16-byte keys, AES-256 for 32-byte keys).
 * Output is `nonce || ciphertext || tag`.
 *
 * # Safety
 * Input pointers must reference their lengths; `out`/`out_len` writable.
 */
enum Pp2ppStatus pp2pp_seal(const uint8_t *key,
                            size_t key_len,
                            const uint8_t *plaintext,
                            size_t plaintext_len,
                            const uint8_t *ad,
                            size_t ad_len,
                            uint8_t **out,
                            size_t *out_len);

/**
 * Inverse of [`pp2pp_seal`]; `AuthFailure` on any tampering.
 *
 * # Safety
 * Input pointers must reference their lengths; `out`/`out_len` writable.
 */
enum Pp2ppStatus pp2pp_open(const uint8_t *key,
                            size_t key_len,
                            const uint8_t *sealed,
                            size_t sealed_len,
                            const uint8_t *ad,
                            size_t ad_len,
                            uint8_t **out,
                            size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PP2PP_H */
