#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/kv_attention.hpp"
#include "slotforge/layouts.hpp"
#include "slotforge/vmm.hpp"

using namespace slotforge;

namespace {

Vector random_vector(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

Matrix random_matrix(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
  return m;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  REQUIRE(a.size() == b.size());
  return (a - b).cwiseAbs().maxCoeff();
}

Vector rope_ref(const Vector& x, int d_head, double base, long long n) {
  Vector y(x.size());
  for (int e = 0; e < x.size(); e += 2) {
    const int pair = (e % d_head) / 2;
    const double a = static_cast<double>(n) * std::pow(base, -2.0 * pair / d_head);
    y[e] = x[e] * std::cos(a) - x[e + 1] * std::sin(a);
    y[e + 1] = x[e] * std::sin(a) + x[e + 1] * std::cos(a);
  }
  return y;
}

std::vector<double> plain_softmax(const std::vector<double>& s) {
  std::vector<double> p(s.size());
  double mx = s[0];
  for (double v : s) mx = std::max(mx, v);
  double sum = 0.0;
  for (size_t i = 0; i < s.size(); ++i) sum += (p[i] = std::exp(s[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

// Rows of K/V are tokens; scores, softmax and the weighted value sum run
// independently per head.
Vector attention_oracle(const Matrix& K, const Matrix& V, const Vector& q, int H) {
  const int n = static_cast<int>(K.rows()), d = static_cast<int>(K.cols()), dh = d / H;
  Vector att = Vector::Zero(d);
  for (int h = 0; h < H; ++h) {
    std::vector<double> s(n, 0.0);
    for (int v = 0; v < n; ++v)
      for (int e = 0; e < dh; ++e) s[v] += q[h * dh + e] * K(v, h * dh + e);
    const std::vector<double> p = plain_softmax(s);
    for (int v = 0; v < n; ++v)
      for (int e = 0; e < dh; ++e) att[h * dh + e] += p[v] * V(v, h * dh + e);
  }
  return att;
}

// Encode a cache straight from plaintext K/V matrices per the layout contract.
KVCache direct_cache(SimBackend& be, const Matrix& K, const Matrix& V,
                     const AttentionConfig& cfg) {
  const int N = cfg.N, t = cfg.t(), dh = cfg.d_head(), gt = cfg.group_tokens();
  const int n = static_cast<int>(K.rows());
  KVCache c;
  c.n_prime = n;
  for (int j = 0; j * t < n; ++j) {
    SlotVector s = SlotVector::Zero(N);
    for (int tau = 0; tau < t && j * t + tau < n; ++tau)
      for (int E = 0; E < cfg.d; ++E) s[E * t + tau] = K(j * t + tau, E);
    c.k_cts.push_back(be.encrypt(std::move(s)));
  }
  for (int g = 0; g * gt < n; ++g) {
    std::vector<SlotVector> rows(v_variant_count(cfg), SlotVector::Zero(N));
    for (int u = g * gt; u < std::min(n, (g + 1) * gt); ++u) {
      const int ul = u - g * gt, j0 = ul % t;
      for (int h = 0; h < cfg.H; ++h)
        for (int e = 0; e < dh; ++e)
          rows[v_variant_index(cfg, v_variant_of(cfg, e, ul))][(h * dh + e) * t + j0] =
              V(u, h * dh + e);
    }
    std::vector<Ciphertext> enc;
    for (auto& r : rows) enc.push_back(be.encrypt(std::move(r)));
    c.v_cts.push_back(std::move(enc));
  }
  return c;
}

Ciphertext encrypt_interleaved(SimBackend& be, const Vector& x, const AttentionConfig& cfg,
                               int offset = 0) {
  Layout ly = make_interleaved(cfg.d, cfg.N, offset, cfg.H);
  return be.encrypt(encode(x, ly, cfg.N), -1, ly);
}

double map_score(const std::vector<Ciphertext>& maps, const AttentionConfig& cfg, int h, int v) {
  const int gt = cfg.group_tokens();
  return maps[v / gt].slots[h * gt + v % gt];
}

}  // namespace

TEST_CASE("qk_dot packs per-head scores with exact zero tails") {
  const int N = 8, L = 8, d = 4, H = 1, np = 5;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, L});
  validate_attention_config(cfg, be.N());
  std::mt19937_64 rng(21);
  Matrix K = random_matrix(rng, np, d), V = random_matrix(rng, np, d);
  Vector q = random_vector(rng, d);
  KVCache cache = direct_cache(be, K, V, cfg);

  be.ledger().reset();
  Ciphertext qc = encrypt_interleaved(be, q, cfg);
  auto maps = qk_dot(be, qc, cache, cfg);
  REQUIRE(maps.size() == 1);
  CHECK(be.ledger().totals().ct_ct_mults == 3);  // ceil(5 / 2) key cts
  CHECK(qc.level - maps[0].level == 2);
  for (int v = 0; v < np; ++v) {
    double ref = 0.0;
    for (int e = 0; e < d; ++e) ref += q[e] * K(v, e);
    CHECK(std::abs(map_score(maps, cfg, 0, v) - ref) < 1e-9);
  }
  for (int i = np; i < N; ++i) CHECK(maps[0].slots[i] == 0.0);
}

TEST_CASE("qk_dot splits long caches across maps") {
  const int N = 32, L = 8, d = 16, H = 4, np = 13;  // t = 2, 8 tokens per map
  AttentionConfig cfg{N, d, H, 0, 16};
  SimBackend be({N, L});
  std::mt19937_64 rng(22);
  Matrix K = random_matrix(rng, np, d), V = random_matrix(rng, np, d);
  Vector q = random_vector(rng, d);
  KVCache cache = direct_cache(be, K, V, cfg);

  be.ledger().reset();
  Ciphertext qc = encrypt_interleaved(be, q, cfg);
  auto maps = qk_dot(be, qc, cache, cfg);
  REQUIRE(maps.size() == 2);
  CHECK(be.ledger().totals().ct_ct_mults == 7);  // ceil(13 / 2)
  const int dh = d / H, gt = cfg.group_tokens();
  for (int h = 0; h < H; ++h)
    for (int v = 0; v < np; ++v) {
      double ref = 0.0;
      for (int e = 0; e < dh; ++e) ref += q[h * dh + e] * K(v, h * dh + e);
      CHECK(std::abs(map_score(maps, cfg, h, v) - ref) < 1e-9);
    }
  for (int h = 0; h < H; ++h)
    for (int v = np; v < 2 * gt; ++v) CHECK(maps[v / gt].slots[h * gt + v % gt] == 0.0);
}

TEST_CASE("one-hot queries read out single key columns") {
  const int N = 16, d = 4, H = 2, np = 7;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, 8});
  std::mt19937_64 rng(23);
  Matrix K = random_matrix(rng, np, d), V = random_matrix(rng, np, d);
  KVCache cache = direct_cache(be, K, V, cfg);
  for (int E = 0; E < d; ++E) {
    Vector q = Vector::Zero(d);
    q[E] = 1.0;
    auto maps = qk_dot(be, encrypt_interleaved(be, q, cfg), cache, cfg);
    const int h = E / (d / H);
    for (int v = 0; v < np; ++v) {
      CHECK(std::abs(map_score(maps, cfg, h, v) - K(v, E)) < 1e-12);
      CHECK(std::abs(map_score(maps, cfg, 1 - h, v)) < 1e-12);
    }
  }
}

TEST_CASE("appends charge exactly the contracted additions") {
  const int N = 64, L = 12, d = 8, H = 2, t = 8, n_max = 33;
  AttentionConfig cfg{N, d, H, 0, n_max};
  SimBackend be({N, L});
  std::mt19937_64 rng(31);
  Matrix K = random_matrix(rng, n_max, d), V = random_matrix(rng, n_max, d);
  KVCache cache;
  for (int u = 0; u < n_max; ++u) {
    // value pieces for token u first, then its key
    Layout vly = make_interleaved(d, N, u % t, H);
    vly.deferred_mask = true;
    SlotVector open = SlotVector::Constant(N, 7.5);  // garbage everywhere...
    for (int E = 0; E < d; ++E) open[E * t + u % t] = V(u, E);  // ...except the data
    Ciphertext v_open = be.encrypt(std::move(open), -1, vly);

    OpCounts t0 = be.ledger().totals();
    auto parts = make_v_pieces(be, v_open, cfg, u);
    OpCounts t1 = be.ledger().totals();
    CHECK(t1.ct_pt_mults - t0.ct_pt_mults == d / H);
    CHECK(t1.rotations == t0.rotations);
    REQUIRE(parts.size() == static_cast<size_t>(d / H));
    for (int e = 0; e < d / H; ++e) {
      CHECK(parts[e].level == v_open.level - 1);
      for (int i = 0; i < N; ++i) {
        const bool keep = i % t == u % t && (i / t) % (d / H) == e;
        if (keep)
          CHECK(parts[e].slots[i] == V(u, i / t));
        else
          CHECK(parts[e].slots[i] == 0.0);
      }
    }

    cache = v_append(be, cache, parts, cfg);
    OpCounts t2 = be.ledger().totals();
    CHECK(t2.additions - t1.additions == d / H);
    CHECK(t2.rotations == t1.rotations);
    CHECK(t2.ct_pt_mults == t1.ct_pt_mults);
    CHECK(t2.ct_ct_mults == t1.ct_ct_mults);

    Ciphertext k_new = encrypt_interleaved(be, K.row(u).transpose(), cfg, u % t);
    OpCounts t3 = be.ledger().totals();
    cache = k_append(be, cache, k_new, cfg);
    OpCounts t4 = be.ledger().totals();
    CHECK(t4.additions - t3.additions == (u % t == 0 ? 0 : 1));
    CHECK(cache.n_prime == u + 1);
    CHECK(cache.k_cts.size() == static_cast<size_t>((u + 1 + t - 1) / t));
  }

  // the appended cache is exactly the directly encoded one
  KVCache ref = direct_cache(be, K, V, cfg);
  REQUIRE(cache.k_cts.size() == ref.k_cts.size());
  for (size_t j = 0; j < ref.k_cts.size(); ++j)
    CHECK((cache.k_cts[j].slots - ref.k_cts[j].slots).abs().maxCoeff() == 0.0);
  REQUIRE(cache.v_cts.size() == ref.v_cts.size());
  for (size_t g = 0; g < ref.v_cts.size(); ++g) {
    REQUIRE(cache.v_cts[g].size() == ref.v_cts[g].size());
    for (size_t i = 0; i < ref.v_cts[g].size(); ++i)
      CHECK((cache.v_cts[g][i].slots - ref.v_cts[g][i].slots).abs().maxCoeff() == 0.0);
  }

  // at capacity both append paths refuse
  Ciphertext k_extra = encrypt_interleaved(be, K.row(0).transpose(), cfg, cache.n_prime % t);
  CHECK_THROWS_AS(k_append(be, cache, k_extra, cfg), CacheFull);
  std::vector<Ciphertext> dummy(d / H, be.zeros());
  CHECK_THROWS_AS(v_append(be, cache, dummy, cfg), CacheFull);
}

TEST_CASE("softmax_times_v recombines probabilities and values at depth two") {
  const int N = 32, L = 12;
  std::mt19937_64 rng(41);
  for (int d : {4, 8}) {
    for (int H : {1, 2}) {
      const int np = 11;
      AttentionConfig cfg{N, d, H, 0, 16};
      SimBackend be({N, L});
      Matrix K = random_matrix(rng, np, d), V = random_matrix(rng, np, d);
      Vector q = random_vector(rng, d);
      KVCache cache = direct_cache(be, K, V, cfg);
      auto maps = qk_dot(be, encrypt_interleaved(be, q, cfg), cache, cfg);
      auto probs = exact_softmax_maps(be, maps, cfg, np);
      Ciphertext out = softmax_times_v(be, probs, cache, cfg);
      CHECK(probs[0].level - out.level == 2);
      REQUIRE(out.layout.has_value());
      CHECK(out.layout->kind == LayoutKind::Interleaved);
      CHECK(out.layout->offset == 0);
      CHECK_FALSE(out.layout->deferred_mask);
      CHECK(max_abs_diff(decode(out.slots, *out.layout), attention_oracle(K, V, q, H)) < 1e-9);
      const int t = cfg.t();
      for (int i = 0; i < N; ++i)
        if (i % t != 0) CHECK(out.slots[i] == 0.0);
    }
  }
}

TEST_CASE("one-hot probabilities select single cached values") {
  const int N = 16, d = 4, H = 2, np = 6;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, 10});
  std::mt19937_64 rng(43);
  Matrix K = random_matrix(rng, np, d), V = random_matrix(rng, np, d);
  KVCache cache = direct_cache(be, K, V, cfg);
  const int gt = cfg.group_tokens();
  for (int v = 0; v < np; ++v) {
    SlotVector p = SlotVector::Zero(N);
    for (int h = 0; h < H; ++h) p[h * gt + v % gt] = 1.0;
    std::vector<Ciphertext> probs{be.encrypt(std::move(p))};
    Ciphertext out = softmax_times_v(be, probs, cache, cfg);
    CHECK(max_abs_diff(decode(out.slots, *out.layout), V.row(v).transpose()) < 1e-12);
  }
}

TEST_CASE("attention chain matches the plaintext oracle across shapes") {
  const int N = 64, L = 24;
  std::mt19937_64 rng(4242);
  int instances = 0;
  for (int d : {4, 16, 64}) {
    for (int H : {1, 2, 4}) {
      for (int np : {1, 3, 5, 13, 17}) {
        AttentionConfig cfg{N, d, H, 0, 24};
        if (np > cfg.n_max) continue;
        SimBackend be({N, L});
        validate_attention_config(cfg, be.N());
        Matrix K = random_matrix(rng, np, d), V = random_matrix(rng, np, d);
        Vector q = random_vector(rng, d);
        KVCache cache = direct_cache(be, K, V, cfg);
        be.ledger().reset();
        Ciphertext qc = encrypt_interleaved(be, q, cfg);
        auto maps = qk_dot(be, qc, cache, cfg);
        CHECK(be.ledger().totals().ct_ct_mults == (np + cfg.t() - 1) / cfg.t());
        CHECK(maps.size() ==
              static_cast<size_t>((np + cfg.group_tokens() - 1) / cfg.group_tokens()));
        auto probs = exact_softmax_maps(be, maps, cfg, np);
        Ciphertext out = softmax_times_v(be, probs, cache, cfg);
        CHECK(max_abs_diff(decode(out.slots, *out.layout), attention_oracle(K, V, q, H)) < 1e-9);
        ++instances;
      }
    }
  }
  CHECK(instances == 45);
}

TEST_CASE("a full decode step with rotary keys matches the oracle") {
  const int N = 32, L = 16, d = 8, H = 2, t = 4, n = 6;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, L});
  std::mt19937_64 rng(57);
  Matrix Wq = random_matrix(rng, d, d), Wk = random_matrix(rng, d, d),
         Wv = random_matrix(rng, d, d);
  MatrixWeight wq(Wq), wk(Wk), wv(Wv);
  Matrix Kp(n, d), Vp(n, d);  // plaintext cache mirrors
  KVCache cache;
  for (int u = 0; u < n; ++u) {
    Vector x = random_vector(rng, d);
    Kp.row(u) = rope_ref(Wk.transpose() * x, d / H, 10000.0, u).transpose();
    Vp.row(u) = (Wv.transpose() * x).transpose();

    Ciphertext xc = encrypt_interleaved(be, x, cfg);
    Ciphertext k_raw = vmm_interleaved(be, xc, wk, {.out_offset = u % t});
    Ciphertext k_new = rope_apply(be, k_raw, cfg, u);
    CHECK(xc.level - k_new.level == 2);  // projection + fused rotary
    Ciphertext v_raw = vmm_interleaved(be, xc, wv, {.out_offset = u % t});
    cache = v_append(be, cache, make_v_pieces(be, v_raw, cfg, u), cfg);
    cache = k_append(be, cache, k_new, cfg);

    Ciphertext q_raw = vmm_interleaved(be, xc, wq, {});
    Ciphertext qc = rope_apply(be, q_raw, cfg, u);
    Vector q_ref = rope_ref(Wq.transpose() * x, d / H, 10000.0, u);
    auto maps = qk_dot(be, qc, cache, cfg);
    auto probs = exact_softmax_maps(be, maps, cfg, u + 1);
    Ciphertext att = softmax_times_v(be, probs, cache, cfg);
    const Vector ref =
        attention_oracle(Kp.topRows(u + 1), Vp.topRows(u + 1), q_ref, H);
    CHECK(max_abs_diff(decode(att.slots, *att.layout), ref) < 1e-9);
  }
}

TEST_CASE("prefill builds the same cache and outputs as sequential decode") {
  struct Shape {
    int N, d, H, n0;
  };
  for (const Shape sh : {Shape{16, 4, 2, 6}, Shape{16, 8, 2, 11}}) {
    const int t = sh.N / sh.d;
    AttentionConfig cfg{sh.N, sh.d, sh.H, sh.n0, 16};
    SimBackend be({sh.N, 30});
    std::mt19937_64 rng(60 + sh.d);
    Matrix Wq = random_matrix(rng, sh.d, sh.d), Wk = random_matrix(rng, sh.d, sh.d),
           Wv = random_matrix(rng, sh.d, sh.d);
    MatrixWeight wq(Wq), wk(Wk), wv(Wv);
    Matrix X = random_matrix(rng, sh.n0, sh.d);  // token rows

    // batched prompt cts, zero lanes beyond the prompt
    const int P = (sh.n0 + t - 1) / t;
    std::vector<Ciphertext> xs;
    for (int p = 0; p < P; ++p) {
      SlotVector s = SlotVector::Zero(sh.N);
      for (int tau = 0; tau < t && p * t + tau < sh.n0; ++tau)
        for (int E = 0; E < sh.d; ++E) s[E * t + tau] = X(p * t + tau, E);
      xs.push_back(be.encrypt(std::move(s), -1, make_interleaved(sh.d, sh.N, 0, sh.H)));
    }
    PrefillResult pre = prefill(be, xs, {wq, wk, wv, 10000.0}, cfg,
                                [](Backend& b, const PrefillMaps& m, const AttentionConfig& c,
                                   int n0) { return exact_softmax_prefill_maps(b, m, c, n0); });
    CHECK(pre.cache.n_prime == sh.n0);

    // sequential reference: decode chain token by token
    KVCache seq;
    std::vector<Vector> att_seq;
    for (int u = 0; u < sh.n0; ++u) {
      Ciphertext xc = encrypt_interleaved(be, X.row(u).transpose(), cfg);
      Ciphertext k_new =
          rope_apply(be, vmm_interleaved(be, xc, wk, {.out_offset = u % t}), cfg, u);
      Ciphertext v_raw = vmm_interleaved(be, xc, wv, {.out_offset = u % t});
      seq = v_append(be, seq, make_v_pieces(be, v_raw, cfg, u), cfg);
      seq = k_append(be, seq, k_new, cfg);
      Ciphertext qc = rope_apply(be, vmm_interleaved(be, xc, wq, {}), cfg, u);
      auto maps = qk_dot(be, qc, seq, cfg);
      auto probs = exact_softmax_maps(be, maps, cfg, u + 1);
      Ciphertext att = softmax_times_v(be, probs, seq, cfg);
      att_seq.push_back(decode(att.slots, *att.layout));
    }

    REQUIRE(pre.cache.k_cts.size() == seq.k_cts.size());
    for (size_t j = 0; j < seq.k_cts.size(); ++j)
      CHECK((pre.cache.k_cts[j].slots - seq.k_cts[j].slots).abs().maxCoeff() < 1e-9);
    REQUIRE(pre.cache.v_cts.size() == seq.v_cts.size());
    for (size_t g = 0; g < seq.v_cts.size(); ++g) {
      REQUIRE(pre.cache.v_cts[g].size() == seq.v_cts[g].size());
      for (size_t i = 0; i < seq.v_cts[g].size(); ++i)
        CHECK((pre.cache.v_cts[g][i].slots - seq.v_cts[g][i].slots).abs().maxCoeff() < 1e-9);
    }

    REQUIRE(pre.attention.size() == static_cast<size_t>(P));
    for (int u = 0; u < sh.n0; ++u) {
      const Ciphertext& a = pre.attention[u / t];
      for (int E = 0; E < sh.d; ++E)
        CHECK(std::abs(a.slots[E * t + u % t] - att_seq[u][E]) < 1e-9);
    }
    // lanes past the prompt stay empty
    for (int tau = sh.n0 % t; tau != 0 && tau < t; ++tau)
      for (int E = 0; E < sh.d; ++E) CHECK(pre.attention[P - 1].slots[E * t + tau] == 0.0);
  }
}

TEST_CASE("a one-token prefill is one decode step") {
  const int N = 16, d = 4, H = 1, t = 4;
  AttentionConfig cfg{N, d, H, 1, 8};
  SimBackend be({N, 20});
  std::mt19937_64 rng(71);
  Matrix Wq = random_matrix(rng, d, d), Wk = random_matrix(rng, d, d),
         Wv = random_matrix(rng, d, d);
  MatrixWeight wq(Wq), wk(Wk), wv(Wv);
  Vector x = random_vector(rng, d);

  SlotVector s = SlotVector::Zero(N);
  for (int E = 0; E < d; ++E) s[E * t] = x[E];
  PrefillResult pre =
      prefill(be, {be.encrypt(std::move(s), -1, make_interleaved(d, N, 0, H))},
              {wq, wk, wv, 10000.0}, cfg, [](Backend& b, const PrefillMaps& m,
                                             const AttentionConfig& c, int n0) {
                return exact_softmax_prefill_maps(b, m, c, n0);
              });

  Ciphertext xc = encrypt_interleaved(be, x, cfg);
  KVCache seq;
  seq = v_append(be, seq, make_v_pieces(be, vmm_interleaved(be, xc, wv, {}), cfg, 0), cfg);
  seq = k_append(be, seq, rope_apply(be, vmm_interleaved(be, xc, wk, {}), cfg, 0), cfg);
  Ciphertext qc = rope_apply(be, vmm_interleaved(be, xc, wq, {}), cfg, 0);
  auto probs = exact_softmax_maps(be, qk_dot(be, qc, seq, cfg), cfg, 1);
  Ciphertext att = softmax_times_v(be, probs, seq, cfg);

  CHECK((pre.cache.k_cts[0].slots - seq.k_cts[0].slots).abs().maxCoeff() < 1e-12);
  for (size_t i = 0; i < seq.v_cts[0].size(); ++i)
    CHECK((pre.cache.v_cts[0][i].slots - seq.v_cts[0][i].slots).abs().maxCoeff() < 1e-12);
  CHECK(max_abs_diff(decode(pre.attention[0].slots, *att.layout),
                     decode(att.slots, *att.layout)) < 1e-12);
}

TEST_CASE("head-blockwise weight permutation only permutes head outputs") {
  const int N = 32, d = 8, H = 2, dh = 4, t = 4, n = 5;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, 20});
  std::mt19937_64 rng(83);
  Matrix Wq = random_matrix(rng, d, d), Wk = random_matrix(rng, d, d),
         Wv = random_matrix(rng, d, d), Wo = random_matrix(rng, d, d);
  auto perm = [&](int E) { return E < dh ? E + dh : E - dh; };  // swap the two heads
  Matrix Wq2(d, d), Wk2(d, d), Wv2(d, d), Wo2(d, d);
  for (int r = 0; r < d; ++r)
    for (int E = 0; E < d; ++E) {
      Wq2(r, E) = Wq(r, perm(E));
      Wk2(r, E) = Wk(r, perm(E));
      Wv2(r, E) = Wv(r, perm(E));
      Wo2(E, r) = Wo(perm(E), r);  // rows permuted inversely
    }

  auto run = [&](const Matrix& Q, const Matrix& Kw, const Matrix& Vw,
                 const Matrix& Ow) {
    MatrixWeight wq(Q), wk(Kw), wv(Vw), wo(Ow);
    KVCache cache;
    std::vector<Vector> ys;
    std::mt19937_64 rx(99);  // same inputs for both runs
    for (int u = 0; u < n; ++u) {
      Vector x = random_vector(rx, d);
      Ciphertext xc = encrypt_interleaved(be, x, cfg);
      Ciphertext k_new =
          rope_apply(be, vmm_interleaved(be, xc, wk, {.out_offset = u % t}), cfg, u);
      cache = v_append(
          be, cache, make_v_pieces(be, vmm_interleaved(be, xc, wv, {.out_offset = u % t}), cfg, u),
          cfg);
      cache = k_append(be, cache, k_new, cfg);
      Ciphertext qc = rope_apply(be, vmm_interleaved(be, xc, wq, {}), cfg, u);
      auto probs = exact_softmax_maps(be, qk_dot(be, qc, cache, cfg), cfg, u + 1);
      Ciphertext att = softmax_times_v(be, probs, cache, cfg);
      Ciphertext y = apply_deferred_mask(be, vmm_interleaved(be, att, wo, {}));
      ys.push_back(decode(y.slots, *y.layout));
    }
    return ys;
  };

  auto base = run(Wq, Wk, Wv, Wo);
  auto swapped = run(Wq2, Wk2, Wv2, Wo2);
  for (int u = 0; u < n; ++u) CHECK(max_abs_diff(base[u], swapped[u]) < 1e-9);
}

TEST_CASE("exact softmax oracles normalize over the causal range") {
  const int N = 16, d = 4, H = 2, np = 7;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, 10});
  std::mt19937_64 rng(91);
  const int gt = cfg.group_tokens();
  std::vector<Ciphertext> maps;
  SlotVector raw = SlotVector::Zero(N);
  for (int h = 0; h < H; ++h)
    for (int v = 0; v < np; ++v) raw[h * gt + v] = random_vector(rng, 1)[0];
  maps.push_back(be.encrypt(std::move(raw), 5));
  auto probs = exact_softmax_maps(be, maps, cfg, np);
  CHECK(probs[0].level == 5);
  for (int h = 0; h < H; ++h) {
    double sum = 0.0;
    for (int v = 0; v < np; ++v) {
      const double p = probs[0].slots[h * gt + v];
      CHECK(p > 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(probs[0].slots[h * gt + np] == 0.0);
  }
}

TEST_CASE("cache and layout contracts are enforced") {
  const int N = 16, d = 4, H = 2;
  AttentionConfig cfg{N, d, H, 0, 8};
  SimBackend be({N, 10});
  std::mt19937_64 rng(97);
  KVCache empty;
  Ciphertext qc = encrypt_interleaved(be, random_vector(rng, d), cfg);
  CHECK_THROWS_AS(qk_dot(be, qc, empty, cfg), CacheEmpty);
  std::vector<Ciphertext> none;
  CHECK_THROWS_AS(softmax_times_v(be, none, empty, cfg), CacheEmpty);

  Matrix K = random_matrix(rng, 3, d), V = random_matrix(rng, 3, d);
  KVCache cache = direct_cache(be, K, V, cfg);
  // wrong offset for the fourth token (3 % 4 == 3, not 0)
  Ciphertext bad_off = encrypt_interleaved(be, random_vector(rng, d), cfg, 0);
  CHECK_THROWS_AS(k_append(be, cache, bad_off, cfg), LayoutMismatch);
  // deferred garbage is rejected everywhere
  Layout dirty = make_interleaved(d, N, 3, H);
  dirty.deferred_mask = true;
  Ciphertext deferred = be.encrypt(SlotVector::Zero(N), -1, dirty);
  CHECK_THROWS_AS(k_append(be, cache, deferred, cfg), LayoutMismatch);
  Layout dirty0 = make_interleaved(d, N, 0, H);
  dirty0.deferred_mask = true;
  Ciphertext deferred_q = be.encrypt(SlotVector::Zero(N), -1, dirty0);
  CHECK_THROWS_AS(qk_dot(be, deferred_q, cache, cfg), LayoutMismatch);
  // probability map count must match the cache
  std::vector<Ciphertext> two(2, be.zeros());
  CHECK_THROWS_AS(softmax_times_v(be, two, cache, cfg), ShapeMismatch);
  // wrong piece count
  std::vector<Ciphertext> parts(d, be.zeros());
  CHECK_THROWS_AS(v_append(be, cache, parts, cfg), ShapeMismatch);

  CHECK_THROWS_AS(validate_attention_config(AttentionConfig{8, 4, 1, 0, 8}, N), ShapeMismatch);
  CHECK_THROWS_AS(validate_attention_config(AttentionConfig{N, 32, 1, 0, 8}, N), ShapeMismatch);
  CHECK_THROWS_AS(validate_attention_config(AttentionConfig{N, 4, 8, 0, 8}, N), ShapeMismatch);
  CHECK_THROWS_AS(validate_attention_config(AttentionConfig{N, 4, 2, 9, 8}, N), ShapeMismatch);
}
