#include "slotforge/kv_attention.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>

namespace slotforge {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

void require_clean_interleaved(const Ciphertext& x, const AttentionConfig& cfg, int offset,
                               const char* who) {
  if (!x.layout || x.layout->kind != LayoutKind::Interleaved)
    throw LayoutMismatch(std::string(who) + ": input must carry an interleaved layout");
  if (x.layout->d != cfg.d)
    throw ShapeMismatch(std::string(who) + ": layout width " + std::to_string(x.layout->d) +
                        " != configured " + std::to_string(cfg.d));
  if (x.layout->offset != offset)
    throw LayoutMismatch(std::string(who) + ": expected slot offset " + std::to_string(offset) +
                         ", got " + std::to_string(x.layout->offset));
  if (x.layout->deferred_mask)
    throw LayoutMismatch(std::string(who) + ": input garbage must be cleared first");
}

// Replicate the single valid lane of an interleaved ct across all t lanes.
Ciphertext replicate_lanes(Backend& be, const Ciphertext& q, int t) {
  Ciphertext r = q;
  for (int step = 1; step < t; step <<= 1) r = be.add(r, be.rotate(r, -step));
  return r;
}

// Tree sum over the d_head element blocks of every head, landing the head's
// total on its first element block.
Ciphertext fold_within_head(Backend& be, Ciphertext c, int d_head, int t) {
  for (int l = 0; (1 << l) < d_head; ++l) c = be.add(c, be.rotate(c, (1 << l) * t));
  return c;
}

// Tree sum over the t lanes of every element block, landing on lane 0.
Ciphertext fold_lanes(Backend& be, Ciphertext c, int t) {
  for (int step = 1; step < t; step <<= 1) c = be.add(c, be.rotate(c, step));
  return c;
}

// Variants populated in a group holding `tokens` appended tokens.
struct VariantRange {
  int lo, hi;  // half-open [lo, hi)
};
VariantRange touched_variants(const AttentionConfig& cfg, int tokens) {
  const int u_max = (tokens - 1) / cfg.t();
  if (cfg.H == 1) return {0, cfg.d_head()};
  return {-u_max, cfg.d_head()};
}

SlotVector rope_batch_plain(int which, const AttentionConfig& cfg, long long first_pos,
                            double base) {
  const int N = cfg.N, t = cfg.t(), dh = cfg.d_head();
  SlotVector p = SlotVector::Zero(N);
  for (int i = 0; i < N; ++i) {
    const int e = (i / t) % dh;
    const int pair = e / 2;
    const double angle =
        static_cast<double>(first_pos + i % t) * std::pow(base, -2.0 * pair / dh);
    if (which == 0)
      p[i] = std::cos(angle);
    else if (which == 1 && e % 2 == 0)
      p[i] = std::sin(angle);
    else if (which == 2 && e % 2 == 1)
      p[i] = -std::sin(angle);
  }
  return p;
}

}  // namespace

void validate_attention_config(const AttentionConfig& cfg, int N_backend) {
  if (cfg.N != N_backend)
    throw ShapeMismatch("attention config N " + std::to_string(cfg.N) +
                        " != backend slot count " + std::to_string(N_backend));
  if (!is_pow2(cfg.N) || !is_pow2(cfg.d) || !is_pow2(cfg.H))
    throw ShapeMismatch("attention config: N, d and H must be powers of two");
  if (cfg.H > cfg.d || cfg.d > cfg.N)
    throw ShapeMismatch("attention config: need H <= d <= N");
  if (cfg.n0 < 0 || cfg.n_max < std::max(cfg.n0, 1))
    throw ShapeMismatch("attention config: need 0 <= n0 <= n_max, n_max >= 1");
}

int v_variant_count(const AttentionConfig& cfg) {
  return cfg.H == 1 ? cfg.d_head() : 2 * cfg.d_head() - 1;
}

int v_variant_index(const AttentionConfig& cfg, int w) {
  const int dh = cfg.d_head();
  if (cfg.H == 1) {
    if (w < 0 || w >= dh) throw ShapeMismatch("v_variant_index: merged variant out of range");
    return w;
  }
  if (w <= -dh || w >= dh) throw ShapeMismatch("v_variant_index: variant out of range");
  return w + dh - 1;
}

int v_variant_of(const AttentionConfig& cfg, int e, int u_local) {
  const int raw = e - u_local / cfg.t();
  return cfg.H == 1 ? static_cast<int>(pos_mod(raw, cfg.d_head())) : raw;
}

Ciphertext rope_apply(Backend& be, const Ciphertext& x, const AttentionConfig& cfg,
                      long long position, double base) {
  if (!x.layout || x.layout->kind != LayoutKind::Interleaved || x.layout->d != cfg.d)
    throw LayoutMismatch("rope_apply: input must be interleaved at the configured width");
  RoPEParams rp{base, position, cfg.d_head(), cfg.t()};
  return fused_extract(be, x, Successor::Rope, &rp, nullptr);
}

Ciphertext rope_apply_batch(Backend& be, const Ciphertext& x, const AttentionConfig& cfg,
                            long long first_pos, double base) {
  require_clean_interleaved(x, cfg, 0, "rope_apply_batch");
  if (cfg.d_head() % 2 != 0) throw ShapeMismatch("rope_apply_batch: d_head must be even");
  const int s = cfg.t();
  Ciphertext y = be.mul_plain(x, rope_batch_plain(0, cfg, first_pos, base));
  y = be.add(y, be.rotate(be.mul_plain(x, rope_batch_plain(1, cfg, first_pos, base)), -s));
  y = be.add(y, be.rotate(be.mul_plain(x, rope_batch_plain(2, cfg, first_pos, base)), s));
  y.layout = x.layout;
  return y;
}

KVCache k_append(Backend& be, const KVCache& cache, const Ciphertext& k_new,
                 const AttentionConfig& cfg) {
  if (cache.n_prime >= cfg.n_max) throw CacheFull("k_append: cache at capacity");
  const int t = cfg.t();
  require_clean_interleaved(k_new, cfg, cache.n_prime % t, "k_append");
  KVCache out = cache;
  if (cache.n_prime % t == 0)
    out.k_cts.push_back(k_new);
  else
    out.k_cts.back() = be.add(out.k_cts.back(), k_new);
  out.n_prime = cache.n_prime + 1;
  return out;
}

std::vector<Ciphertext> make_v_pieces(Backend& be, const Ciphertext& v_open,
                                      const AttentionConfig& cfg, int position) {
  if (position < 0 || position >= cfg.n_max)
    throw ShapeMismatch("make_v_pieces: position outside cache capacity");
  if (!v_open.layout || v_open.layout->kind != LayoutKind::Interleaved ||
      v_open.layout->d != cfg.d)
    throw LayoutMismatch("make_v_pieces: input must be interleaved at the configured width");
  const int t = cfg.t(), dh = cfg.d_head(), j0 = position % t;
  if (v_open.layout->offset != j0)
    throw LayoutMismatch("make_v_pieces: value ct offset does not match the token position");
  std::vector<Ciphertext> parts;
  parts.reserve(dh);
  for (int e = 0; e < dh; ++e) {
    SlotVector m = SlotVector::Zero(cfg.N);
    for (int h = 0; h < cfg.H; ++h) m[(h * dh + e) * t + j0] = 1.0;
    parts.push_back(fused_extract(be, v_open, Successor::VcacheMask, nullptr, &m));
  }
  return parts;
}

KVCache v_append(Backend& be, const KVCache& cache, const std::vector<Ciphertext>& parts,
                 const AttentionConfig& cfg) {
  if (cache.n_prime >= cfg.n_max) throw CacheFull("v_append: cache at capacity");
  const int dh = cfg.d_head();
  if (static_cast<int>(parts.size()) != dh)
    throw ShapeMismatch("v_append: expected d/H pieces, got " + std::to_string(parts.size()));
  const int gt = cfg.group_tokens();
  const int g = cache.n_prime / gt;
  const int u_local = cache.n_prime - g * gt;
  KVCache out = cache;
  if (g == static_cast<int>(out.v_cts.size()))
    out.v_cts.emplace_back(v_variant_count(cfg), be.zeros());
  for (int e = 0; e < dh; ++e) {
    const int idx = v_variant_index(cfg, v_variant_of(cfg, e, u_local));
    out.v_cts[g][idx] = be.add(out.v_cts[g][idx], parts[e]);
  }
  return out;
}

std::vector<Ciphertext> qk_dot(Backend& be, const Ciphertext& q, const KVCache& cache,
                               const AttentionConfig& cfg) {
  if (cache.n_prime == 0) throw CacheEmpty("qk_dot: no cached keys");
  require_clean_interleaved(q, cfg, 0, "qk_dot");
  const int t = cfg.t(), dh = cfg.d_head(), gt = cfg.group_tokens();
  if (static_cast<int>(cache.k_cts.size()) != ceil_div(cache.n_prime, t))
    throw ShapeMismatch("qk_dot: key ct count does not match n_prime");

  const Ciphertext q_rep = replicate_lanes(be, q, t);
  const SlotVector head_mask =
      make_mask(make_interleaved(cfg.d, cfg.N, 0, cfg.H), cfg.N, MaskKind::ReplicateExtract);

  std::vector<std::optional<Ciphertext>> maps(ceil_div(cache.n_prime, gt));
  for (int j = 0; j < static_cast<int>(cache.k_cts.size()); ++j) {
    Ciphertext prod = be.mul(q_rep, cache.k_cts[j]);
    prod = fold_within_head(be, std::move(prod), dh, t);
    Ciphertext masked = be.mul_plain(prod, head_mask);
    const int local = (j * t) % gt;
    Ciphertext packed = local ? be.rotate(masked, -local) : std::move(masked);
    auto& slot = maps[(j * t) / gt];
    slot = slot ? be.add(*slot, packed) : std::move(packed);
  }

  std::vector<Ciphertext> out;
  out.reserve(maps.size());
  for (auto& m : maps) {
    m->layout.reset();
    out.push_back(std::move(*m));
  }
  return out;
}

Ciphertext softmax_times_v(Backend& be, const std::vector<Ciphertext>& probs,
                           const KVCache& cache, const AttentionConfig& cfg) {
  if (cache.n_prime == 0) throw CacheEmpty("softmax_times_v: no cached values");
  const int t = cfg.t(), gt = cfg.group_tokens();
  const int n_maps = ceil_div(cache.n_prime, gt);
  if (static_cast<int>(probs.size()) != n_maps)
    throw ShapeMismatch("softmax_times_v: expected " + std::to_string(n_maps) +
                        " probability maps, got " + std::to_string(probs.size()));
  if (static_cast<int>(cache.v_cts.size()) < n_maps)
    throw ShapeMismatch("softmax_times_v: value cache is missing groups");

  std::optional<Ciphertext> acc;
  for (int g = 0; g < n_maps; ++g) {
    const int tokens = std::min(gt, cache.n_prime - g * gt);
    const auto [w_lo, w_hi] = touched_variants(cfg, tokens);
    for (int w = w_lo; w < w_hi; ++w) {
      const Ciphertext scores = w ? be.rotate(probs[g], -w * t) : probs[g];
      Ciphertext prod = be.mul(scores, cache.v_cts[g][v_variant_index(cfg, w)]);
      acc = acc ? be.add(*acc, prod) : std::move(prod);
    }
  }
  Ciphertext folded = fold_lanes(be, std::move(*acc), t);
  Ciphertext out = be.mul_plain(folded, stride_mask(cfg.N, t, 0));
  out.layout = make_interleaved(cfg.d, cfg.N, 0, cfg.H);
  return out;
}

// --- prefill ---------------------------------------------------------------

PrefillResult prefill(Backend& be, const std::vector<Ciphertext>& x_prompt,
                      const PrefillWeights& w, const AttentionConfig& cfg,
                      const PrefillSoftmax& softmax_fn) {
  const int t = cfg.t(), dh = cfg.d_head(), gt = cfg.group_tokens(), N = cfg.N, n0 = cfg.n0;
  if (n0 < 1) throw ShapeMismatch("prefill: need a nonempty prompt");
  if (n0 > cfg.n_max) throw CacheFull("prefill: prompt exceeds cache capacity");
  const int P = ceil_div(n0, t);
  if (static_cast<int>(x_prompt.size()) != P)
    throw ShapeMismatch("prefill: expected " + std::to_string(P) + " prompt cts, got " +
                        std::to_string(x_prompt.size()));

  // Projections and rotary embedding; the batched key ct IS the cache entry.
  KVCache cache;
  std::vector<Ciphertext> q_cts;
  q_cts.reserve(P);
  for (int p = 0; p < P; ++p) {
    q_cts.push_back(rope_apply_batch(be, vmm_batch(be, x_prompt[p], w.wq), cfg,
                                     static_cast<long long>(p) * t, w.rope_base));
    cache.k_cts.push_back(rope_apply_batch(be, vmm_batch(be, x_prompt[p], w.wk), cfg,
                                           static_cast<long long>(p) * t, w.rope_base));
  }

  // Value pieces: all t lanes of a prompt ct share one element-block mask.
  for (int p = 0; p < P; ++p) {
    const Ciphertext v_raw = vmm_batch(be, x_prompt[p], w.wv);
    const int g = (p * t) / gt;
    const int u_cap = p - g * dh;  // shared U of the ct's lanes
    if (g == static_cast<int>(cache.v_cts.size()))
      cache.v_cts.emplace_back(v_variant_count(cfg), be.zeros());
    for (int e = 0; e < dh; ++e) {
      SlotVector m = SlotVector::Zero(N);
      for (int h = 0; h < cfg.H; ++h) m.segment((h * dh + e) * t, t).setOnes();
      Ciphertext piece = be.mul_plain(v_raw, m);
      const int idx = v_variant_index(cfg, v_variant_of(cfg, e, u_cap * t));
      cache.v_cts[g][idx] = be.add(cache.v_cts[g][idx], piece);
    }
  }
  cache.n_prime = n0;

  // Lane-phase rotations of the key cts, shared across all query cts.
  std::vector<std::vector<Ciphertext>> k_rot(P);
  for (int j = 0; j < P; ++j) {
    k_rot[j].reserve(t);
    k_rot[j].push_back(cache.k_cts[j]);
    for (int rho = 1; rho < t; ++rho)
      k_rot[j].push_back(inner_rotate(be, cache.k_cts[j], rho, t));
  }

  // Score maps with causality and the n0 bound folded into the pack masks.
  PrefillMaps maps;
  maps.maps.resize(P);
  std::vector<std::vector<std::vector<std::optional<Ciphertext>>>> acc(P);
  for (int p = 0; p < P; ++p)
    acc[p].resize((p * t) / gt + 1, std::vector<std::optional<Ciphertext>>(t));
  for (int p = 0; p < P; ++p) {
    for (int j = 0; j <= p; ++j) {
      const int g_key = (j * t) / gt;
      const int local = (j * t) % gt;
      for (int rho = 0; rho < t; ++rho) {
        SlotVector m = SlotVector::Zero(N);
        bool any = false;
        for (int tau = 0; tau < t; ++tau) {
          const int key = j * t + (tau + rho) % t;
          const int query = p * t + tau;
          if (key <= query && key < n0 && query < n0) {
            for (int h = 0; h < cfg.H; ++h) m[h * gt + tau] = 1.0;
            any = true;
          }
        }
        if (!any) continue;
        Ciphertext prod = be.mul(q_cts[p], k_rot[j][rho]);
        prod = fold_within_head(be, std::move(prod), dh, t);
        Ciphertext masked = be.mul_plain(prod, m);
        Ciphertext packed = local ? be.rotate(masked, -local) : std::move(masked);
        auto& cell = acc[p][g_key][rho];
        cell = cell ? be.add(*cell, packed) : std::move(packed);
      }
    }
  }
  for (int p = 0; p < P; ++p) {
    maps.maps[p].resize(acc[p].size());
    for (size_t g = 0; g < acc[p].size(); ++g) {
      const int ref_level = acc[p][g][0]->level;  // rho = 0 is never empty
      for (int rho = 0; rho < t; ++rho) {
        Ciphertext cell = acc[p][g][rho] ? std::move(*acc[p][g][rho]) : be.zeros(ref_level);
        cell.layout.reset();
        maps.maps[p][g].push_back(std::move(cell));
      }
    }
  }

  const PrefillMaps probs = softmax_fn(be, maps, cfg, n0);
  if (probs.maps.size() != maps.maps.size())
    throw ShapeMismatch("prefill: softmax changed the map shape");

  // Probability-weighted values: lane-phase rotations of every populated
  // variant handle, shared across query cts; no fold and no final mask.
  const int groups = static_cast<int>(cache.v_cts.size());
  std::vector<std::vector<std::vector<Ciphertext>>> v_rot(groups);
  for (int g = 0; g < groups; ++g) {
    const int tokens = std::min(gt, n0 - g * gt);
    const auto [w_lo, w_hi] = touched_variants(cfg, tokens);
    v_rot[g].resize(w_hi - w_lo);
    for (int w_i = w_lo; w_i < w_hi; ++w_i) {
      auto& row = v_rot[g][w_i - w_lo];
      const Ciphertext& base = cache.v_cts[g][v_variant_index(cfg, w_i)];
      row.push_back(base);
      for (int rho = 1; rho < t; ++rho) row.push_back(inner_rotate(be, base, rho, t));
    }
  }
  std::vector<Ciphertext> att;
  att.reserve(P);
  for (int p = 0; p < P; ++p) {
    std::optional<Ciphertext> sum;
    for (size_t g = 0; g < probs.maps[p].size(); ++g) {
      const int tokens = std::min(gt, n0 - static_cast<int>(g) * gt);
      const auto [w_lo, w_hi] = touched_variants(cfg, tokens);
      for (int rho = 0; rho < t; ++rho) {
        const Ciphertext& pm = probs.maps[p][g][rho];
        for (int w_i = w_lo; w_i < w_hi; ++w_i) {
          const Ciphertext scores = w_i ? be.rotate(pm, -w_i * t) : pm;
          Ciphertext prod = be.mul(scores, v_rot[g][w_i - w_lo][rho]);
          sum = sum ? be.add(*sum, prod) : std::move(prod);
        }
      }
    }
    Ciphertext a = std::move(*sum);
    a.layout = make_interleaved(cfg.d, N, 0, cfg.H);
    att.push_back(std::move(a));
  }
  return PrefillResult{std::move(att), std::move(cache)};
}

// --- exact-mode softmax oracles ---------------------------------------------

namespace {

// Stable softmax of `scores`; empty input stays empty.
std::vector<double> plain_softmax(const std::vector<double>& scores) {
  std::vector<double> p(scores.size());
  if (scores.empty()) return p;
  const double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) sum += (p[i] = std::exp(scores[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace

std::vector<Ciphertext> exact_softmax_maps(Backend& be, const std::vector<Ciphertext>& maps,
                                           const AttentionConfig& cfg, int n_prime) {
  const int gt = cfg.group_tokens();
  if (static_cast<int>(maps.size()) != ceil_div(n_prime, gt))
    throw ShapeMismatch("exact_softmax_maps: map count does not match n_prime");
  std::vector<SlotVector> out(maps.size(), SlotVector::Zero(cfg.N));
  for (int h = 0; h < cfg.H; ++h) {
    std::vector<double> scores(n_prime);
    for (int v = 0; v < n_prime; ++v) scores[v] = maps[v / gt].slots[h * gt + v % gt];
    const std::vector<double> p = plain_softmax(scores);
    for (int v = 0; v < n_prime; ++v) out[v / gt][h * gt + v % gt] = p[v];
  }
  std::vector<Ciphertext> res;
  res.reserve(maps.size());
  for (size_t m = 0; m < maps.size(); ++m)
    res.push_back(be.exact_transform(maps[m], [&out, m](const SlotVector&) { return out[m]; }));
  return res;
}

PrefillMaps exact_softmax_prefill_maps(Backend& be, const PrefillMaps& maps,
                                       const AttentionConfig& cfg, int n0) {
  const int t = cfg.t(), gt = cfg.group_tokens();
  std::vector<std::vector<std::vector<SlotVector>>> out(maps.maps.size());
  for (size_t p = 0; p < maps.maps.size(); ++p) {
    out[p].resize(maps.maps[p].size());
    for (auto& g : out[p]) g.assign(t, SlotVector::Zero(cfg.N));
  }
  for (size_t p = 0; p < maps.maps.size(); ++p) {
    for (int tau = 0; tau < t; ++tau) {
      const int query = static_cast<int>(p) * t + tau;
      if (query >= n0) continue;
      for (int h = 0; h < cfg.H; ++h) {
        std::vector<double> scores(query + 1);
        for (int k = 0; k <= query; ++k) {
          const int g = k / gt, rho = static_cast<int>(pos_mod(k % t - tau, t));
          scores[k] = maps.maps[p][g][rho].slots[h * gt + (k - g * gt) / t * t + tau];
        }
        const std::vector<double> prob = plain_softmax(scores);
        for (int k = 0; k <= query; ++k) {
          const int g = k / gt, rho = static_cast<int>(pos_mod(k % t - tau, t));
          out[p][g][rho][h * gt + (k - g * gt) / t * t + tau] = prob[k];
        }
      }
    }
  }
  PrefillMaps res;
  res.maps.resize(maps.maps.size());
  for (size_t p = 0; p < maps.maps.size(); ++p) {
    for (size_t g = 0; g < maps.maps[p].size(); ++g) {
      std::vector<Ciphertext> row;
      row.reserve(t);
      for (int rho = 0; rho < t; ++rho)
        row.push_back(be.exact_transform(
            maps.maps[p][g][rho],
            [&out, p, g, rho](const SlotVector&) { return out[p][g][rho]; }));
      res.maps[p].push_back(std::move(row));
    }
  }
  return res;
}

}  // namespace slotforge
