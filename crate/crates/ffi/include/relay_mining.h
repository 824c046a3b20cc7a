#ifndef RELAY_MINING_H
#define RELAY_MINING_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RmStatus {
  RM_STATUS_OK = 0,
  RM_STATUS_NULL_POINTER = 1,
  RM_STATUS_INVALID_ARGUMENT = 2,
  RM_STATUS_INVALID_UTF8 = 3,
  RM_STATUS_DUPLICATE = 4,
  RM_STATUS_NOT_FOUND = 5,
  RM_STATUS_EMPTY_TRIE = 6,
  RM_STATUS_PARSE = 7,
  RM_STATUS_INTERNAL = 8,
} RmStatus;

// Opaque per-service difficulty controller.
typedef struct RmDifficulty RmDifficulty;

// Opaque membership proof.
typedef struct RmProof RmProof;

// Opaque sparse Merkle sum trie.
typedef struct RmTrie RmTrie;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static description of a status code. Never null; do not free.
const char *rm_status_str(enum RmStatus status);

// Detail for the most recent failure on this thread; empty after a success.
// Valid until the next `rm_*` call on the same thread.
const char *rm_last_error(void);

// Relay digest of a request/response pair into `out` (32 bytes).
//
// # Safety
// Buffers must be valid for their stated lengths; `out` must hold 32 bytes.
enum RmStatus rm_digest(const uint8_t *request,
                        size_t request_len,
                        const uint8_t *response,
                        size_t response_len,
                        uint8_t *out);

// Whether `digest` (32 bytes) collides under collision probability `probability`.
//
// # Safety
// `digest` must point to 32 readable bytes; `out` must be writable.
enum RmStatus rm_check_collision(const uint8_t *digest, double probability, bool *out);

// Volume estimate `claims / probability`.
//
// # Safety
// `out` must be writable.
enum RmStatus rm_estimate_volume(uint64_t claims, double probability, double *out);

// New in-memory trie over `key_bits`-bit keys (1..=256).
//
// # Safety
// `out` must be writable.
enum RmStatus rm_trie_new(uint32_t key_bits, struct RmTrie **out);

// # Safety
// `trie` must come from `rm_trie_new` and not be used afterwards. Null is a no-op.
void rm_trie_free(struct RmTrie *trie);

// Inserts a weight-1 leaf. Re-inserting a key returns `Duplicate`.
//
// # Safety
// `key` must point to 32 bytes; `value` must be valid for `value_len` bytes.
enum RmStatus rm_trie_insert(struct RmTrie *trie,
                             const uint8_t *key,
                             const uint8_t *value,
                             size_t value_len);

// Root hash (32 bytes into `hash_out`) and sum.
//
// # Safety
// `hash_out` must hold 32 bytes; `sum_out` must be writable.
enum RmStatus rm_trie_root(const struct RmTrie *trie, uint8_t *hash_out, uint64_t *sum_out);

// Membership proof for `key`.
//
// # Safety
// `key` must point to 32 bytes; `out` must be writable.
enum RmStatus rm_trie_prove(const struct RmTrie *trie, const uint8_t *key, struct RmProof **out);

// Proof of the leaf closest to `target` (the claim challenge path).
//
// # Safety
// `target` must point to 32 bytes; `out` must be writable.
enum RmStatus rm_trie_closest_proof(const struct RmTrie *trie,
                                    const uint8_t *target,
                                    struct RmProof **out);

// # Safety
// `proof` must come from this library and not be used afterwards. Null is a no-op.
void rm_proof_free(struct RmProof *proof);

// Checks `proof` against a root. When `target` is non-null the proof must
// also be for the leaf closest to it.
//
// # Safety
// `root_hash` must point to 32 bytes, `target` to 32 bytes or be null; `valid` must be writable.
enum RmStatus rm_proof_verify(const struct RmProof *proof,
                              const uint8_t *root_hash,
                              uint64_t root_sum,
                              const uint8_t *target,
                              bool *valid);

// Leaf key (32 bytes into `key_out`) and weight of the proven leaf.
//
// # Safety
// `key_out` must hold 32 bytes; `weight_out` must be writable.
enum RmStatus rm_proof_leaf(const struct RmProof *proof, uint8_t *key_out, uint64_t *weight_out);

// Text form of a proof. Release the string with `rm_string_free`.
//
// # Safety
// `out` must be writable.
enum RmStatus rm_proof_to_text(const struct RmProof *proof, char **out);

// Parses the text form produced by `rm_proof_to_text`.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum RmStatus rm_proof_from_text(const char *text, struct RmProof **out);

// # Safety
// `s` must come from this library and not be used afterwards. Null is a no-op.
void rm_string_free(char *s);

// New controller starting at `p = 1`, height 0.
//
// # Safety
// `out` must be writable.
enum RmStatus rm_difficulty_new(uint64_t target_claims,
                                double ema_alpha,
                                uint64_t update_interval,
                                struct RmDifficulty **out);

// # Safety
// `state` must come from `rm_difficulty_new` and not be used afterwards. Null is a no-op.
void rm_difficulty_free(struct RmDifficulty *state);

// Feeds one block's claim count; writes the probability for the next block.
//
// # Safety
// `next_probability` may be null.
enum RmStatus rm_difficulty_observe(struct RmDifficulty *state,
                                    uint64_t claims,
                                    double *next_probability);

// Current probability, EMA of estimated relays and block height.
//
// # Safety
// Each out-pointer may be null.
enum RmStatus rm_difficulty_get(const struct RmDifficulty *state,
                                double *probability,
                                double *r_ema,
                                uint64_t *height);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELAY_MINING_H */
