#include <stdio.h>
#include <string.h>

#include "relay_mining.h"

#define CHECK(expr)                                                          \
  do {                                                                       \
    RmStatus s_ = (expr);                                                    \
    if (s_ != RM_STATUS_OK) {                                                \
      fprintf(stderr, "%s: %s (%s)\n", #expr, rm_status_str(s_), rm_last_error()); \
      return 1;                                                              \
    }                                                                        \
  } while (0)

static void hex(const uint8_t *b, char *out) {
  for (int i = 0; i < 32; i++) sprintf(out + 2 * i, "%02x", b[i]);
}

int main(void) {
  uint8_t d[32];
  char h[65];
  CHECK(rm_digest((const uint8_t *)"ping", 4, (const uint8_t *)"pong", 4, d));
  hex(d, h);
  printf("digest %s\n", h);

  bool hit;
  CHECK(rm_check_collision(d, 1.0, &hit));
  if (!hit) return 2;
  if (rm_check_collision(d, 0.0, &hit) != RM_STATUS_INVALID_ARGUMENT) return 3;

  RmTrie *trie = NULL;
  CHECK(rm_trie_new(4, &trie));
  const uint8_t nibbles[4] = {0x20, 0x60, 0x30, 0xd0};
  for (int i = 0; i < 4; i++) {
    uint8_t key[32] = {0};
    char value[8];
    key[0] = nibbles[i];
    snprintf(value, sizeof value, "leaf-%d", i + 1);
    CHECK(rm_trie_insert(trie, key, (const uint8_t *)value, strlen(value)));
  }
  uint8_t dup[32] = {0x20};
  if (rm_trie_insert(trie, dup, (const uint8_t *)"x", 1) != RM_STATUS_DUPLICATE) return 4;

  uint8_t root[32];
  uint64_t sum;
  CHECK(rm_trie_root(trie, root, &sum));
  hex(root, h);
  printf("root %s %llu\n", h, (unsigned long long)sum);

  uint8_t target[32] = {0x10};
  RmProof *proof = NULL;
  CHECK(rm_trie_closest_proof(trie, target, &proof));
  uint8_t leaf[32];
  uint64_t weight;
  CHECK(rm_proof_leaf(proof, leaf, &weight));
  printf("leaf %x weight %llu\n", leaf[0] >> 4, (unsigned long long)weight);

  bool valid;
  CHECK(rm_proof_verify(proof, root, sum, target, &valid));
  printf("valid %d\n", valid);
  CHECK(rm_proof_verify(proof, root, sum + 1, NULL, &valid));
  printf("inflated %d\n", valid);

  char *text = NULL;
  CHECK(rm_proof_to_text(proof, &text));
  RmProof *back = NULL;
  CHECK(rm_proof_from_text(text, &back));
  rm_string_free(text);
  rm_proof_free(back);
  rm_proof_free(proof);
  rm_trie_free(trie);

  RmDifficulty *ctl = NULL;
  CHECK(rm_difficulty_new(10000, 0.1, 4, &ctl));
  double p = 1.0;
  for (int i = 0; i < 4; i++) CHECK(rm_difficulty_observe(ctl, (uint64_t)(1e6 * p), &p));
  printf("p %.6f\n", p);
  rm_difficulty_free(ctl);
  return 0;
}
