#pragma once

// Encrypted KV-cache attention over the slot-SIMD engine.
//
// Packing conventions (head-major element index E = h*d_head + e, t = N/d
// token lanes per slot-stride):
//
//   K cache ct j:   slot E*t + tau   holds K_{j*t+tau}[E]        (tau in [0,t))
//   score map m:    slot h*(N/H) + (v - m*N/H)  holds  <q, K_v>_h
//   V cache:        per group g of N/H consecutive tokens, one handle per
//                   "variant" w with X_w[E*t + j] = V_{g*N/H + (e-w)*t + j}[E]
//                   (slots outside the variant's validity band are zero)
//
// A variant collects every cached V element whose row offset within the head
// is e - w; rotating the score map by -w*t aligns scores with values, so
// score-times-value is one ct-ct mult per populated variant followed by a
// lane fold and a single mask. For H == 1, w and w - d_head need the same
// rotation mod N, so the handles merge down to d_head of them; for H > 1 the
// merged pair would add cross-head garbage inside valid slots, hence
// 2*d_head - 1 handles per group (total nonzero volume stays d/H slots per
// token either way).

#include <functional>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/layouts.hpp"
#include "slotforge/vmm.hpp"

namespace slotforge {

struct AttentionConfig {
  int N = 0;      // slot count (must match the backend)
  int d = 0;      // model width
  int H = 1;      // head count
  int n0 = 0;     // prompt length
  int n_max = 0;  // cache capacity in tokens

  int d_head() const { return d / H; }
  int t() const { return N / d; }                // token lanes per ct
  int group_tokens() const { return N / H; }     // tokens per score map / V group
};

// Throws ShapeError unless N, d, H are powers of two, H | d, d <= N,
// 0 <= n0 <= n_max, and rope shifts fit (d_head even when rope is used is
// checked at rope time, not here).
void validate_attention_config(const AttentionConfig& cfg, int N_backend);

// Copy-on-write value type: append operations return a new cache.
struct KVCache {
  int n_prime = 0;                              // tokens appended so far
  std::vector<Ciphertext> k_cts;                // ceil(n_prime / t) entries
  std::vector<std::vector<Ciphertext>> v_cts;   // [group][variant]
};

// Number of V variant handles per group: d_head when H == 1 (w and w - d_head
// merge), else 2*d_head - 1 (w in (-d_head, d_head)).
int v_variant_count(const AttentionConfig& cfg);
// Storage index of variant w (w canonicalized mod d_head when H == 1).
int v_variant_index(const AttentionConfig& cfg, int w);
// Variant receiving element e (within-head) of local token u_local.
int v_variant_of(const AttentionConfig& cfg, int e, int u_local);

// Rotary position embedding for one token at `position`, fused with the
// deferred-mask cleanup of the preceding vmm (3 ct-pt mults, 2 rotations,
// 1 level). Requires interleaved layout with d_head even.
Ciphertext rope_apply(Backend& be, const Ciphertext& x, const AttentionConfig& cfg,
                      long long position, double base = 10000.0);

// Batched variant for prompt cts: lane tau gets position first_pos + tau.
// Same cost shape as rope_apply.
Ciphertext rope_apply_batch(Backend& be, const Ciphertext& x, const AttentionConfig& cfg,
                            long long first_pos, double base = 10000.0);

// Append one RoPE'd key ct (interleaved, offset n_prime % t, clean mask).
// Cost: exactly one addition when n_prime % t != 0, zero engine ops when the
// token starts a fresh ct. Throws CacheFull at capacity, LayoutMismatch on a
// wrong offset or a deferred mask.
KVCache k_append(Backend& be, const KVCache& cache, const Ciphertext& k_new,
                 const AttentionConfig& cfg);

// Split the raw V-generation vmm output (deferred mask allowed) for the token
// at `position` into d/H masked pieces, one per within-head element; the
// piece masks replace the deferred-mask cleanup, so this costs d/H ct-pt
// mults and exactly one level. parts[e] is elementwise zero outside the H
// slots (h*d_head + e)*t + position % t.
std::vector<Ciphertext> make_v_pieces(Backend& be, const Ciphertext& v_open,
                                      const AttentionConfig& cfg, int position);

// Fold the pieces for token n_prime into the variant handles: exactly d/H
// additions, no rotations or mults (missing group handles are created as
// zero cts first, off-ledger). Does not advance n_prime (k_append does).
KVCache v_append(Backend& be, const KVCache& cache,
                 const std::vector<Ciphertext>& parts, const AttentionConfig& cfg);

// Scores of one replicated query against the whole cache: one ct-ct mult per
// K ct (= ceil(n_prime/t) exactly), a within-head fold, one mask per K ct,
// and packing rotations. Depth from q: exactly 2 (the ct-ct and the mask).
// Returns ceil(n_prime / (N/H)) map cts; slots beyond n_prime are exact
// zeros. Throws CacheEmpty when the cache has no tokens.
std::vector<Ciphertext> qk_dot(Backend& be, const Ciphertext& q, const KVCache& cache,
                               const AttentionConfig& cfg);

// Probability-weighted V sum: one ct-ct mult per populated variant handle,
// score-alignment rotations, a lane fold, and one final mask. Depth from the
// probability maps: exactly 2. Output is interleaved head-major at offset 0
// with a clean mask, ready for the output projection.
Ciphertext softmax_times_v(Backend& be, const std::vector<Ciphertext>& probs,
                           const KVCache& cache, const AttentionConfig& cfg);

// --- prefill ---------------------------------------------------------------

// Score maps for a whole prompt: maps[p][g][rho] packs the scores of the t
// queries in prompt ct p against the keys of group g at lane phase rho
// (key index g*N/H + j*t + (tau+rho)%t at slot h*(N/H) + j*t + tau).
// Causality and the n0 bound are already applied as exact zeros.
struct PrefillMaps {
  std::vector<std::vector<std::vector<Ciphertext>>> maps;
};

using PrefillSoftmax =
    std::function<PrefillMaps(Backend&, const PrefillMaps&, const AttentionConfig&, int /*n0*/)>;

struct PrefillWeights {
  const WeightView& wq;
  const WeightView& wk;
  const WeightView& wv;
  double rope_base = 10000.0;
};

struct PrefillResult {
  std::vector<Ciphertext> attention;  // one batch ct per prompt ct, all slots valid
  KVCache cache;                      // slot-identical to sequential appends
};

// Process ceil(n0/t) prompt cts (contiguous-batch layout: slot E*t + tau =
// x_{p*t+tau}[E]) in one shot: batch QKV projections, batched rope, K cts
// pushed directly as cache entries, V pieces per prompt ct, lane-phase score
// maps with causal masking, the caller's softmax, and the probability-
// weighted V sum per prompt ct. softmax_fn sees the packed maps and must
// preserve their shape.
PrefillResult prefill(Backend& be, const std::vector<Ciphertext>& x_prompt,
                      const PrefillWeights& w, const AttentionConfig& cfg,
                      const PrefillSoftmax& softmax_fn);

// --- exact-mode softmax oracles (zero ledger cost, level-preserving) -------

// True softmax over the packed decode maps (per head, over the first n_prime
// score slots); slots beyond n_prime stay exact zeros.
std::vector<Ciphertext> exact_softmax_maps(Backend& be, const std::vector<Ciphertext>& maps,
                                           const AttentionConfig& cfg, int n_prime);

// True softmax over prefill maps (per query and head, over the causal key
// range); preserves the packing and its exact zeros.
PrefillMaps exact_softmax_prefill_maps(Backend& be, const PrefillMaps& maps,
                                       const AttentionConfig& cfg, int n0);

}  // namespace slotforge
