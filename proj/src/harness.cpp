#include "slotforge/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>

#include <json.hpp>

#include "slotforge/layouts.hpp"

namespace slotforge {

namespace {

using nlohmann::json;

constexpr double kNormEps = 1e-5;

const char* const kStageNames[11] = {"Q, K, V",
                                     "RoPE & Cache",
                                     "QK^T",
                                     "Softmax",
                                     "Score*V",
                                     "Output projection",
                                     "Add & Norm",
                                     "Up & Gate projection",
                                     "SiLU",
                                     "Down projection",
                                     "Add & Norm"};

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

OpCounts counts_diff(const OpCounts& a, const OpCounts& b) {
  OpCounts d;
  d.rotations = a.rotations - b.rotations;
  d.hoisted_rotations = a.hoisted_rotations - b.hoisted_rotations;
  d.ct_pt_mults = a.ct_pt_mults - b.ct_pt_mults;
  d.ct_ct_mults = a.ct_ct_mults - b.ct_ct_mults;
  d.additions = a.additions - b.additions;
  d.bootstraps = a.bootstraps - b.bootstraps;
  return d;
}

Matrix randn(int rows, int cols, double scale, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = scale * dist(gen);
  return m;
}

Vector randn_vec(int n, double base, double spread, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = base + spread * dist(gen);
  return v;
}

int argmax_low(const Vector& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

Vector rope_rotate(const Vector& x, int d_head, long long n, double base) {
  Vector y = x;
  for (int e = 0; e + 1 < x.size(); e += 2) {
    const int pair = (e % d_head) / 2;
    const double ang = static_cast<double>(n) * std::pow(base, -2.0 * pair / d_head);
    const double c = std::cos(ang), s = std::sin(ang);
    y[e] = x[e] * c - x[e + 1] * s;
    y[e + 1] = x[e] * s + x[e + 1] * c;
  }
  return y;
}

Vector layer_norm(const Vector& v, const Vector& gamma, const Vector& beta) {
  const double mu = v.mean();
  const Vector c = v.array() - mu;
  const double var = c.squaredNorm() / static_cast<double>(v.size());
  return (gamma.array() * c.array() / std::sqrt(var + kNormEps) + beta.array()).matrix();
}

std::string mode_name(NonlinearMode m) {
  return m == NonlinearMode::Exact ? "exact" : "approx";
}

NonlinearMode mode_from_name(const std::string& s) {
  if (s == "exact") return NonlinearMode::Exact;
  if (s == "approx") return NonlinearMode::Approx;
  throw ShapeMismatch("model config: mode must be \"exact\" or \"approx\", got \"" + s + "\"");
}

Layout hidden_layout(const ModelConfig& cfg, int offset = 0, int heads = 1) {
  return make_interleaved(cfg.d, cfg.N, offset, heads);
}

Ciphertext encrypt_hidden(const SimBackend& be, const ModelConfig& cfg, const Vector& x,
                          int level = -1) {
  const Layout ly = hidden_layout(cfg);
  return be.encrypt(encode(x, ly, cfg.N), level < 0 ? be.L() : level, ly);
}

double price_counts(const OpCounts& c, int L) {
  const OpUnitCosts u = calibration_units();
  double ms = (L + 1) * (u.add * static_cast<double>(c.additions) +
                         u.ctpt_mult * static_cast<double>(c.ct_pt_mults) +
                         u.ctct_mult * static_cast<double>(c.ct_ct_mults) +
                         u.rotation * static_cast<double>(c.rotations + c.hoisted_rotations));
  if (c.bootstraps > 0) ms += static_cast<double>(c.bootstraps) * calibrated_boot_ms(L);
  return ms;
}

std::string matrix_name(int block, const char* role) {
  return "b" + std::to_string(block) + "." + role;
}

}  // namespace

// --- config ------------------------------------------------------------------

std::string ModelConfig::to_json(int indent) const {
  json j;
  j["d"] = d;
  j["H"] = H;
  j["n_layers"] = n_layers;
  j["ffn_alpha"] = ffn_alpha;
  j["vocab"] = vocab;
  j["N"] = N;
  j["L"] = L;
  j["rope_base"] = rope_base;
  j["mode"] = mode_name(mode);
  j["seed"] = seed;
  return j.dump(indent);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  cfg.d = j.at("d").get<int>();
  cfg.H = j.at("H").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.ffn_alpha = j.at("ffn_alpha").get<int>();
  cfg.vocab = j.at("vocab").get<int>();
  cfg.N = j.at("N").get<int>();
  cfg.L = j.at("L").get<int>();
  cfg.rope_base = j.at("rope_base").get<double>();
  cfg.mode = mode_from_name(j.at("mode").get<std::string>());
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

void validate_model_config(const ModelConfig& cfg) {
  if (!is_pow2(cfg.N) || !is_pow2(cfg.d) || !is_pow2(cfg.H))
    throw ShapeMismatch("model config: N, d, H must be powers of two");
  if (cfg.d > cfg.N) throw ShapeMismatch("model config: d must not exceed N");
  if (cfg.H > cfg.d || (cfg.d / cfg.H) % 2 != 0)
    throw ShapeMismatch("model config: head width d/H must be a positive even number");
  if (cfg.n_layers < 1) throw ShapeMismatch("model config: need at least one block");
  if (cfg.ffn_alpha < 1 || padded_dim(cfg.ffn_alpha * cfg.d) > cfg.N)
    throw ShapeMismatch("model config: padded FFN width must fit the slot count");
  if (cfg.vocab < 2) throw ShapeMismatch("model config: vocab must be at least 2");
  if (cfg.L < 1) throw ShapeMismatch("model config: level budget must be at least 1");
  if (!(cfg.rope_base > 1.0)) throw ShapeMismatch("model config: rope_base must exceed 1");
}

std::uint64_t effective_seed(const ModelConfig& cfg) {
  const char* env = std::getenv("SLOTFORGE_SEED");
  if (env == nullptr || *env == '\0') return cfg.seed;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw ShapeMismatch("SLOTFORGE_SEED: expected an unsigned integer");
  return static_cast<std::uint64_t>(v);
}

AttentionConfig attention_config(const ModelConfig& cfg, int n_max) {
  AttentionConfig a;
  a.N = cfg.N;
  a.d = cfg.d;
  a.H = cfg.H;
  a.n0 = 0;
  a.n_max = n_max;
  return a;
}

// --- weights -----------------------------------------------------------------

ModelWeights make_weights(const ModelConfig& cfg) {
  validate_model_config(cfg);
  std::mt19937_64 gen(effective_seed(cfg));
  const int d = cfg.d;
  const int ad = cfg.ffn_alpha * d;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sad = 1.0 / std::sqrt(static_cast<double>(ad));
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(d / cfg.H));

  ModelWeights w;
  w.embedding = randn(cfg.vocab, d, 1.0, gen);
  w.blocks.resize(cfg.n_layers);
  for (auto& blk : w.blocks) {
    blk.wq = randn(d, d, sd * score_scale, gen);
    blk.wk = randn(d, d, sd, gen);
    blk.wv = randn(d, d, sd, gen);
    blk.wo = randn(d, d, sd, gen);
    blk.w_gate = randn(d, ad, sd, gen);
    blk.w_up = randn(d, ad, sd, gen);
    blk.w_down = randn(ad, d, sad, gen);
    blk.gamma1 = randn_vec(d, 1.0, 0.1, gen);
    blk.beta1 = randn_vec(d, 0.0, 0.01, gen);
    blk.gamma2 = randn_vec(d, 1.0, 0.1, gen);
    blk.beta2 = randn_vec(d, 0.0, 0.01, gen);
  }
  return w;
}

void save_weights(const std::filesystem::path& dir, const ModelWeights& w) {
  save_weight(dir, "embedding", w.embedding);
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& blk = w.blocks[b];
    const int bi = static_cast<int>(b);
    save_weight(dir, matrix_name(bi, "wq"), blk.wq);
    save_weight(dir, matrix_name(bi, "wk"), blk.wk);
    save_weight(dir, matrix_name(bi, "wv"), blk.wv);
    save_weight(dir, matrix_name(bi, "wo"), blk.wo);
    save_weight(dir, matrix_name(bi, "w_gate"), blk.w_gate);
    save_weight(dir, matrix_name(bi, "w_up"), blk.w_up);
    save_weight(dir, matrix_name(bi, "w_down"), blk.w_down);
    save_weight(dir, matrix_name(bi, "gamma1"), blk.gamma1.transpose());
    save_weight(dir, matrix_name(bi, "beta1"), blk.beta1.transpose());
    save_weight(dir, matrix_name(bi, "gamma2"), blk.gamma2.transpose());
    save_weight(dir, matrix_name(bi, "beta2"), blk.beta2.transpose());
  }
}

ModelWeights load_weights(const std::filesystem::path& dir, const ModelConfig& cfg) {
  validate_model_config(cfg);
  auto load_mat = [&](const std::string& name, int rows, int cols) {
    Matrix m = load_weight(dir, name);
    if (m.rows() != rows || m.cols() != cols)
      throw ShapeMismatch("weights: " + name + " has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                          std::to_string(cols));
    return m;
  };
  auto load_vec = [&](const std::string& name, int n) -> Vector {
    return load_mat(name, 1, n).row(0).transpose();
  };

  const int d = cfg.d;
  const int ad = cfg.ffn_alpha * d;
  ModelWeights w;
  w.embedding = load_mat("embedding", cfg.vocab, d);
  w.blocks.resize(cfg.n_layers);
  for (int b = 0; b < cfg.n_layers; ++b) {
    auto& blk = w.blocks[b];
    blk.wq = load_mat(matrix_name(b, "wq"), d, d);
    blk.wk = load_mat(matrix_name(b, "wk"), d, d);
    blk.wv = load_mat(matrix_name(b, "wv"), d, d);
    blk.wo = load_mat(matrix_name(b, "wo"), d, d);
    blk.w_gate = load_mat(matrix_name(b, "w_gate"), d, ad);
    blk.w_up = load_mat(matrix_name(b, "w_up"), d, ad);
    blk.w_down = load_mat(matrix_name(b, "w_down"), ad, d);
    blk.gamma1 = load_vec(matrix_name(b, "gamma1"), d);
    blk.beta1 = load_vec(matrix_name(b, "beta1"), d);
    blk.gamma2 = load_vec(matrix_name(b, "gamma2"), d);
    blk.beta2 = load_vec(matrix_name(b, "beta2"), d);
  }
  return w;
}

std::vector<int> seeded_prompt(const ModelConfig& cfg, int n0) {
  if (n0 < 1) throw ShapeMismatch("prompt: need at least one token");
  std::mt19937_64 gen(effective_seed(cfg) + 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> dist(0, cfg.vocab - 1);
  std::vector<int> out(n0);
  for (int& t : out) t = dist(gen);
  return out;
}

// --- plaintext reference -------------------------------------------------------

ReferenceTrace plaintext_reference(const ModelConfig& cfg, const ModelWeights& w,
                                   const std::vector<int>& prompt, int gen_len) {
  validate_model_config(cfg);
  if (prompt.empty()) throw ShapeMismatch("reference: need a nonempty prompt");
  if (gen_len < 0) throw ShapeMismatch("reference: gen_len must be >= 0");
  for (int t : prompt)
    if (t < 0 || t >= cfg.vocab) throw ShapeMismatch("reference: token id out of range");

  const int n0 = static_cast<int>(prompt.size());
  const int dh = cfg.d / cfg.H;
  const int positions = gen_len == 0 ? n0 : n0 + gen_len - 1;

  ReferenceTrace ref;
  ref.tokens = prompt;
  std::vector<std::vector<Vector>> K(cfg.n_layers), V(cfg.n_layers);

  for (int pos = 0; pos < positions; ++pos) {
    Vector x = w.embedding.row(ref.tokens[pos]).transpose();
    for (int b = 0; b < cfg.n_layers; ++b) {
      const auto& blk = w.blocks[b];
      const Vector q = rope_rotate(blk.wq.transpose() * x, dh, pos, cfg.rope_base);
      K[b].push_back(rope_rotate(blk.wk.transpose() * x, dh, pos, cfg.rope_base));
      V[b].push_back(blk.wv.transpose() * x);
      Vector att = Vector::Zero(cfg.d);
      const int n = static_cast<int>(K[b].size());
      for (int h = 0; h < cfg.H; ++h) {
        Vector sc(n);
        for (int j = 0; j < n; ++j) sc[j] = q.segment(h * dh, dh).dot(K[b][j].segment(h * dh, dh));
        Vector p = (sc.array() - sc.maxCoeff()).exp();
        p /= p.sum();
        for (int j = 0; j < n; ++j) att.segment(h * dh, dh) += p[j] * V[b][j].segment(h * dh, dh);
      }
      const Vector sum = x + blk.wo.transpose() * att;
      const Vector y = layer_norm(sum, blk.gamma1, blk.beta1);
      const Vector gate = blk.w_gate.transpose() * y;
      const Vector up = blk.w_up.transpose() * y;
      const Vector act =
          (gate.array().unaryExpr([](double v) { return silu_scalar(v); }) * up.array()).matrix();
      const Vector sum2 = y + blk.w_down.transpose() * act;
      x = layer_norm(sum2, blk.gamma2, blk.beta2);
    }
    ref.final_states.push_back(x);
    ref.logits.push_back(w.embedding * x);
    if (pos + 1 >= n0 && static_cast<int>(ref.tokens.size()) < n0 + gen_len)
      ref.tokens.push_back(argmax_low(ref.logits.back()));
  }

  ref.K.resize(cfg.n_layers);
  ref.V.resize(cfg.n_layers);
  for (int b = 0; b < cfg.n_layers; ++b) {
    ref.K[b].resize(positions, cfg.d);
    ref.V[b].resize(positions, cfg.d);
    for (int j = 0; j < positions; ++j) {
      ref.K[b].row(j) = K[b][j].transpose();
      ref.V[b].row(j) = V[b][j].transpose();
    }
  }
  return ref;
}

// --- nonlinear schedule ----------------------------------------------------------

NonlinearSchedule nonlinear_schedule(const ModelConfig& cfg) {
  NonlinearSchedule s;
  s.softmax = desk_spec("desk-shallow", "softmax");
  s.norm = desk_spec("desk-shallow", "norm");
  s.silu = desk_spec("desk-shallow", "silu");
  if (cfg.mode == NonlinearMode::Exact) {
    s.softmax.exact = true;
    s.norm.exact = true;
    s.silu.exact = true;
    return s;
  }
  // trim the norm schedule so extract + norm fits the desk level budget as a
  // single solver layer
  s.norm.iterations = 3;
  s.norm.depth_budget = 0;
  s.softmax.strict_domain = false;
  s.norm.strict_domain = false;
  s.silu.strict_domain = false;
  return s;
}

// --- plan construction -------------------------------------------------------------

std::vector<LayerSpec> decoder_layer_specs(const ModelConfig& cfg, int n_max) {
  validate_model_config(cfg);
  if (n_max < 1) throw ShapeMismatch("decoder specs: n_max must be >= 1");
  const AttentionConfig acfg = attention_config(cfg, n_max);
  const int t = acfg.t();
  const int kcts = (n_max + t - 1) / t;
  const int vvar = v_variant_count(acfg);
  const int maps = (n_max + acfg.group_tokens() - 1) / acfg.group_tokens();
  const NonlinearSchedule sched = nonlinear_schedule(cfg);
  const bool exact = cfg.mode == NonlinearMode::Exact;

  const int softmax_d = exact ? 0 : softmax_depth(sched.softmax);
  const int norm_d = exact ? 0 : 1 + norm_depth(sched.norm);  // extract + norm
  const int silu_d = exact ? 1 : silu_depth(sched.silu) + 1;  // activation + gate product

  const int depths[11] = {1, 1, 2, softmax_d, 2, 1, norm_d, 1, silu_d, 1, norm_d};
  const int cts[11] = {1,          4, 2 + kcts + vvar, maps + 1 + vvar, maps + 1 + vvar, 2, 1, 1,
                       3,          2, 1};

  SubLayerTrace norm_trace;
  if (!exact) {
    SubLayerPhase extract;
    extract.name = "extract";
    extract.depth = 1;
    extract.ct_count = 1;
    extract.interruptible = false;
    norm_trace.phases.push_back(extract);
    for (const auto& p : sublayer_trace("norm", sched.norm).phases) norm_trace.phases.push_back(p);
  }

  std::vector<LayerSpec> block(11);
  for (int i = 0; i < 11; ++i) {
    block[i].name = kStageNames[i];
    block[i].depth = depths[i];
    block[i].cost_id = i;
    block[i].ct_count = cts[i];
  }
  block[6].shortcut_from = 0;   // attention residual parks the block input
  block[10].shortcut_from = 7;  // FFN residual parks the normed state
  if (!exact) {
    block[3].trace = sublayer_trace("softmax", sched.softmax);
    block[6].trace = norm_trace;
    block[10].trace = norm_trace;
  }
  return block;
}

// --- encrypted decode step -----------------------------------------------------------

Ciphertext run_decode_step(SimBackend& be, const ModelConfig& cfg, const ModelWeights& w,
                           const PlacementPlan* plan, EncryptedState& state,
                           std::vector<LevelEvent>* trace, std::vector<OpCounts>* stage_counts) {
  validate_model_config(cfg);
  if (static_cast<int>(state.caches.size()) != cfg.n_layers)
    throw ShapeMismatch("decode step: expected one cache per block");
  if (static_cast<int>(w.blocks.size()) != cfg.n_layers)
    throw ShapeMismatch("decode step: weight/block count mismatch");
  if (plan && static_cast<int>(plan->entries.size()) != 11 * cfg.n_layers)
    throw ShapeMismatch("decode step: plan has " + std::to_string(plan->entries.size()) +
                        " entries, decode chain has " + std::to_string(11 * cfg.n_layers));
  const AttentionConfig acfg = attention_config(cfg, state.n_max);
  validate_attention_config(acfg, be.N());
  const NonlinearSchedule sched = nonlinear_schedule(cfg);
  const bool exact = cfg.mode == NonlinearMode::Exact;
  const int t = acfg.t();
  const long long pos = state.position;
  const Layout ffn_layout = make_interleaved(padded_dim(cfg.ffn_alpha * cfg.d), cfg.N, 0, 1);

  Ciphertext x = state.x;
  if (plan && x.level > plan->entries[0].input_level)
    x = be.level_drop(x, plan->entries[0].input_level);

  OpCounts before{};
  int level_in = 0;
  auto begin_stage = [&](const Ciphertext& chain, int idx) {
    if (plan && chain.level != plan->entries[idx].input_level)
      throw LevelUnderflow("decode step: stage " + std::to_string(idx) + " entered at level " +
                           std::to_string(chain.level) + ", plan expects " +
                           std::to_string(plan->entries[idx].input_level));
    before = be.ledger().totals();
    level_in = chain.level;
  };
  auto end_stage = [&](int block, int stage, const Ciphertext& chain) {
    if (stage_counts) stage_counts->push_back(counts_diff(be.ledger().totals(), before));
    if (trace) {
      LevelEvent ev;
      ev.step = 0;
      ev.block = block;
      ev.phase = kStageNames[stage];
      ev.level_in = level_in;
      ev.level_out = chain.level;
      trace->push_back(ev);
    }
  };
  // The plan action recorded after stage idx applies at the next boundary:
  // a bootstrap restores every ciphertext live there (the parked residual and
  // any cache handle a later ct-ct mult of this step still consumes), so the
  // chain's level model stays exact; a drop only lowers the chain.
  auto post_action = [&](int idx, std::vector<Ciphertext*> live, bool lift_k, bool lift_v,
                         KVCache* cache) {
    if (!plan) return;
    const PlanEntry& e = plan->entries[idx];
    if (e.bootstrap_to) {
      auto scope = be.phase("Bootstrappings");
      for (Ciphertext* c : live) *c = be.bootstrap(*c, *e.bootstrap_to);
      if (cache && lift_k)
        for (auto& kc : cache->k_cts) kc = be.bootstrap(kc, *e.bootstrap_to);
      if (cache && lift_v)
        for (auto& group : cache->v_cts)
          for (auto& vc : group) vc = be.bootstrap(vc, *e.bootstrap_to);
      if (trace && !trace->empty()) trace->back().bootstrap_to = *e.bootstrap_to;
    } else if (e.drop_to) {
      *live.front() = be.level_drop(*live.front(), *e.drop_to);
    }
  };

  for (int b = 0; b < cfg.n_layers; ++b) {
    const auto& blk = w.blocks[b];
    KVCache& cache = state.caches[b];
    const int base = 11 * b;
    const MatrixWeight wq(blk.wq), wk(blk.wk), wv(blk.wv), wo(blk.wo);
    const MatrixWeight wgate(blk.w_gate), wup(blk.w_up), wdown(blk.w_down);

    // [0] query/key/value projections
    begin_stage(x, base + 0);
    Ciphertext q_o, k_o, v_o;
    {
      auto ph = be.phase(kStageNames[0]);
      q_o = vmm_interleaved(be, x, wq, {.bsgs = true});
      k_o = vmm_interleaved(be, x, wk, {.bsgs = true, .out_offset = static_cast<int>(pos % t)});
      v_o = vmm_interleaved(be, x, wv, {.bsgs = true, .out_offset = static_cast<int>(pos % t)});
    }
    end_stage(b, 0, q_o);
    post_action(base + 0, {&q_o, &k_o, &v_o, &x}, false, false, nullptr);

    // [1] rotary embedding fused with garbage extraction, then both appends
    // (the appends are level-free: cache entries land at the rotary/piece
    // output level)
    begin_stage(q_o, base + 1);
    Ciphertext q;
    {
      auto ph = be.phase(kStageNames[1]);
      q = rope_apply(be, q_o, acfg, pos, cfg.rope_base);
      const Ciphertext k = rope_apply(be, k_o, acfg, pos, cfg.rope_base);
      const auto pieces = make_v_pieces(be, v_o, acfg, static_cast<int>(pos));
      cache = v_append(be, cache, pieces, acfg);
      cache = k_append(be, cache, k, acfg);
    }
    end_stage(b, 1, q);
    post_action(base + 1, {&q, &x}, true, true, &cache);

    // [2] scores against the whole cache
    begin_stage(q, base + 2);
    std::vector<Ciphertext> maps;
    {
      auto ph = be.phase(kStageNames[2]);
      maps = qk_dot(be, q, cache, acfg);
    }
    end_stage(b, 2, maps.front());
    {
      std::vector<Ciphertext*> live;
      for (auto& m : maps) live.push_back(&m);
      live.push_back(&x);
      post_action(base + 2, live, false, true, &cache);
    }

    // [3] softmax over the packed score maps
    begin_stage(maps.front(), base + 3);
    std::vector<Ciphertext> probs;
    {
      auto ph = be.phase(kStageNames[3]);
      probs = exact ? exact_softmax_maps(be, maps, acfg, cache.n_prime)
                    : approx_softmax(be, maps, cache.n_prime, cfg.H, sched.softmax);
    }
    end_stage(b, 3, probs.front());
    {
      std::vector<Ciphertext*> live;
      for (auto& p : probs) live.push_back(&p);
      live.push_back(&x);
      post_action(base + 3, live, false, true, &cache);
    }

    // [4] probability-weighted value sum
    begin_stage(probs.front(), base + 4);
    Ciphertext att;
    {
      auto ph = be.phase(kStageNames[4]);
      att = softmax_times_v(be, probs, cache, acfg);
    }
    end_stage(b, 4, att);
    post_action(base + 4, {&att, &x}, false, false, nullptr);

    // [5] output projection; the residual add runs level-free at this stage's
    // tail so the next boundary carries a single live ciphertext
    begin_stage(att, base + 5);
    Ciphertext sum;
    {
      auto ph = be.phase(kStageNames[5]);
      sum = vmm_interleaved(be, att, wo, {.bsgs = true});
    }
    {
      auto ph = be.phase(kStageNames[6]);
      const Layout deferred = *sum.layout;
      sum = be.add(x, sum);
      sum.layout = deferred;
    }
    end_stage(b, 5, sum);
    post_action(base + 5, {&sum}, false, false, nullptr);

    // [6] first norm
    begin_stage(sum, base + 6);
    Ciphertext y;
    {
      auto ph = be.phase(kStageNames[6]);
      if (exact) {
        const Ciphertext cleaned = exact_apply(be, sum, [](double v) { return v; });
        y = exact_norm(be, cleaned, blk.gamma1, blk.beta1, kNormEps);
      } else {
        const Ciphertext cleaned = fused_extract(be, sum, Successor::NormMask);
        y = approx_norm(be, cleaned, blk.gamma1, blk.beta1, kNormEps, sched.norm);
      }
    }
    end_stage(b, 6, y);
    post_action(base + 6, {&y}, false, false, nullptr);

    // [7] up and gate projections
    begin_stage(y, base + 7);
    Ciphertext gate_o, up_o;
    {
      auto ph = be.phase(kStageNames[7]);
      gate_o = vmm_interleaved(be, y, wgate, {.bsgs = true});
      up_o = vmm_interleaved(be, y, wup, {.bsgs = true});
    }
    end_stage(b, 7, gate_o);
    post_action(base + 7, {&gate_o, &up_o, &y}, false, false, nullptr);

    // [8] gated activation; the activation zeroes the projection garbage, so
    // the product is clean
    begin_stage(gate_o, base + 8);
    Ciphertext prod;
    {
      auto ph = be.phase(kStageNames[8]);
      const Ciphertext act = exact ? exact_silu(be, gate_o) : approx_silu(be, gate_o, sched.silu);
      prod = be.mul(act, up_o);
      prod.layout = ffn_layout;
    }
    end_stage(b, 8, prod);
    post_action(base + 8, {&prod, &y}, false, false, nullptr);

    // [9] down projection with the second tail residual
    begin_stage(prod, base + 9);
    Ciphertext sum2;
    {
      auto ph = be.phase(kStageNames[9]);
      sum2 = vmm_interleaved(be, prod, wdown, {.bsgs = true});
    }
    {
      auto ph = be.phase(kStageNames[6]);
      const Layout deferred = *sum2.layout;
      sum2 = be.add(y, sum2);
      sum2.layout = deferred;
    }
    end_stage(b, 9, sum2);
    post_action(base + 9, {&sum2}, false, false, nullptr);

    // [10] second norm; its output is the next block's chain input
    begin_stage(sum2, base + 10);
    {
      auto ph = be.phase(kStageNames[6]);
      if (exact) {
        const Ciphertext cleaned = exact_apply(be, sum2, [](double v) { return v; });
        x = exact_norm(be, cleaned, blk.gamma2, blk.beta2, kNormEps);
      } else {
        const Ciphertext cleaned = fused_extract(be, sum2, Successor::NormMask);
        x = approx_norm(be, cleaned, blk.gamma2, blk.beta2, kNormEps, sched.norm);
      }
    }
    end_stage(b, 10, x);
    post_action(base + 10, {&x}, false, false, nullptr);
  }

  state.position = pos + 1;
  return x;
}

// --- probe ----------------------------------------------------------------------------

ProbeResult probe_decoder_counts(const ModelConfig& cfg, const ModelWeights& w, int n_max) {
  validate_model_config(cfg);
  if (n_max < 1) throw ShapeMismatch("probe: n_max must be >= 1");
  ModelConfig probe_cfg = cfg;
  probe_cfg.n_layers = 1;  // one block; the chain is periodic in it
  const auto block = decoder_layer_specs(probe_cfg, n_max);
  int depth_sum = 0;
  for (const auto& ly : block) depth_sum += ly.depth;
  probe_cfg.L = depth_sum + 4;

  ModelWeights w1;
  w1.embedding = w.embedding;
  w1.blocks = {w.blocks.front()};

  SimBackend warm({probe_cfg.N, probe_cfg.L});
  EncryptedState state;
  state.n_max = n_max;
  std::vector<int> fill = seeded_prompt(probe_cfg, std::max(n_max, 1));
  fill.resize(n_max);
  if (n_max > 1) {
    prefill_prompt(warm, probe_cfg, w1, std::vector<int>(fill.begin(), fill.end() - 1), state,
                   n_max);
  } else {
    state.caches.assign(1, KVCache{});
  }

  SimBackend meas({probe_cfg.N, probe_cfg.L});
  state.x = encrypt_hidden(meas, probe_cfg, w1.embedding.row(fill.back()).transpose());
  state.position = n_max - 1;
  std::vector<LevelEvent> trace;
  ProbeResult pr;
  run_decode_step(meas, probe_cfg, w1, nullptr, state, &trace, &pr.counts);
  pr.depths.reserve(trace.size());
  for (const auto& ev : trace) pr.depths.push_back(ev.level_in - ev.level_out);
  return pr;
}

DecoderPlanInputs decoder_plan_inputs(const ModelConfig& cfg, const ModelWeights& w, int n_max) {
  std::vector<LayerSpec> block = decoder_layer_specs(cfg, n_max);
  ProbeResult pr = probe_decoder_counts(cfg, w, n_max);
  for (std::size_t i = 0; i < block.size(); ++i)
    if (pr.depths[i] != block[i].depth)
      throw ShapeMismatch("plan inputs: stage " + block[i].name + " measured depth " +
                          std::to_string(pr.depths[i]) + ", declared " +
                          std::to_string(block[i].depth));
  CostModel cost = CostModel::calibrated(pr.counts, cfg.L);
  return DecoderPlanInputs{std::move(block), std::move(pr.counts), std::move(cost)};
}

PlacementPlan plan_decode(const ModelConfig& cfg, const ModelWeights& w, int n_max) {
  DecoderPlanInputs in = decoder_plan_inputs(cfg, w, n_max);
  return solve_periodic(in.block, cfg.n_layers, in.cost, cfg.L);
}

// --- prefill ---------------------------------------------------------------------------

std::vector<Vector> prefill_prompt(SimBackend& be, const ModelConfig& cfg, const ModelWeights& w,
                                   const std::vector<int>& tokens, EncryptedState& state,
                                   int n_max) {
  validate_model_config(cfg);
  if (tokens.empty()) throw ShapeMismatch("prefill: need at least one token to cache");
  if (static_cast<int>(tokens.size()) > n_max)
    throw ShapeMismatch("prefill: more tokens than the cache capacity");
  for (int tk : tokens)
    if (tk < 0 || tk >= cfg.vocab) throw ShapeMismatch("prefill: token id out of range");

  const int m = static_cast<int>(tokens.size());
  AttentionConfig acfg = attention_config(cfg, n_max);
  acfg.n0 = m;
  validate_attention_config(acfg, be.N());
  const int t = acfg.t();
  const int P = (m + t - 1) / t;
  const NonlinearSchedule sched = nonlinear_schedule(cfg);
  const bool exact = cfg.mode == NonlinearMode::Exact;
  const Layout batch_layout = make_interleaved(cfg.d, cfg.N, 0, cfg.H);
  const Layout ffn_layout = make_interleaved(padded_dim(cfg.ffn_alpha * cfg.d), cfg.N, 0, 1);

  state.caches.clear();
  state.n_max = n_max;

  auto scope = be.phase("Amortized Prefilling");

  // naive rule: bootstrap to the full budget only when the next sub-chain
  // does not fit the remaining level
  auto ensure = [&](Ciphertext& c, int need) {
    if (c.level < need) c = be.bootstrap(c, be.L());
  };

  // batch ciphertexts: slot E*t + tau holds element E of prompt token p*t + tau
  std::vector<Ciphertext> xs(P);
  for (int p = 0; p < P; ++p) {
    SlotVector slots = SlotVector::Zero(cfg.N);
    for (int tau = 0; tau < t && p * t + tau < m; ++tau) {
      const Vector x = w.embedding.row(tokens[p * t + tau]).transpose();
      for (int e = 0; e < cfg.d; ++e) slots[e * t + tau] = x[e];
    }
    xs[p] = be.encrypt(slots, be.L(), batch_layout);
  }

  const PrefillSoftmax oracle = [](Backend& backend, const PrefillMaps& maps,
                                   const AttentionConfig& c, int n0) {
    return exact_softmax_prefill_maps(backend, maps, c, n0);
  };

  for (int b = 0; b < cfg.n_layers; ++b) {
    const auto& blk = w.blocks[b];
    const MatrixWeight wq(blk.wq), wk(blk.wk), wv(blk.wv), wo(blk.wo);
    const MatrixWeight wgate(blk.w_gate), wup(blk.w_up), wdown(blk.w_down);

    for (auto& x : xs) ensure(x, 7);  // attention sub-chain + output projection
    const PrefillWeights pw{wq, wk, wv, cfg.rope_base};
    PrefillResult res = prefill(be, xs, pw, acfg, oracle);

    std::vector<Ciphertext> next(P);
    for (int p = 0; p < P; ++p) {
      ensure(res.attention[p], 1);
      Ciphertext o = vmm_batch(be, res.attention[p], wo, true);
      Ciphertext sum = be.add(xs[p], o);
      sum.layout = batch_layout;

      bool first_lane = true;
      for (int tau = 0; tau < t && p * t + tau < m; ++tau) {
        ensure(sum, 1);
        Ciphertext lane = be.mul_plain(sum, stride_mask(cfg.N, t, tau));
        lane.layout = make_interleaved(cfg.d, cfg.N, tau, 1);

        Ciphertext y;
        if (exact) {
          y = exact_norm(be, lane, blk.gamma1, blk.beta1, kNormEps);
        } else {
          ensure(lane, norm_depth(sched.norm));
          y = approx_norm(be, lane, blk.gamma1, blk.beta1, kNormEps, sched.norm);
        }

        ensure(y, 1);
        Ciphertext gate_o = vmm_interleaved(be, y, wgate, {.bsgs = true});
        Ciphertext up_o = vmm_interleaved(be, y, wup, {.bsgs = true});
        Ciphertext act;
        if (exact) {
          act = exact_silu(be, gate_o);
          ensure(act, 1);
        } else {
          ensure(gate_o, silu_depth(sched.silu) + 1);
          act = approx_silu(be, gate_o, sched.silu);
        }
        ensure(up_o, 1);
        Ciphertext prod = be.mul(act, up_o);
        prod.layout = ffn_layout;

        ensure(prod, 1);
        Ciphertext down =
            vmm_interleaved(be, prod, wdown, {.bsgs = true, .out_offset = tau});
        Ciphertext sum2 = be.add(y, down);
        sum2.layout = *down.layout;

        Ciphertext z;
        if (exact) {
          const Ciphertext cleaned = exact_apply(be, sum2, [](double v) { return v; });
          z = exact_norm(be, cleaned, blk.gamma2, blk.beta2, kNormEps);
        } else {
          ensure(sum2, 1 + norm_depth(sched.norm));
          const Ciphertext cleaned = fused_extract(be, sum2, Successor::NormMask);
          z = approx_norm(be, cleaned, blk.gamma2, blk.beta2, kNormEps, sched.norm);
        }

        if (first_lane) {
          next[p] = z;
          first_lane = false;
        } else {
          next[p] = be.add(next[p], z);
        }
        next[p].layout = batch_layout;
      }
    }

    // cache entries are long-lived; serve them at the level fresh decode
    // appends reach (chain enters the score stage at most two levels below
    // the budget)
    const int serve = std::max(1, be.L() - 2);
    for (auto& kc : res.cache.k_cts)
      if (kc.level < serve) kc = be.bootstrap(kc, serve);
    for (auto& group : res.cache.v_cts)
      for (auto& vc : group)
        if (vc.level < serve) vc = be.bootstrap(vc, serve);
    state.caches.push_back(std::move(res.cache));

    xs = std::move(next);
  }

  std::vector<Vector> states(m);
  for (int p = 0; p < P; ++p)
    for (int tau = 0; tau < t && p * t + tau < m; ++tau)
      states[p * t + tau] = decode(xs[p].slots, make_interleaved(cfg.d, cfg.N, tau, 1));
  return states;
}

// --- report -------------------------------------------------------------------------------

std::string Report::to_json(int indent) const {
  json j;
  j["config"] = json::parse(config.to_json());
  j["prompt"] = prompt;
  j["generated"] = generated;
  j["max_abs_error"] = max_abs_error;
  j["predicted_plan_cost_ms"] = predicted_plan_cost_ms;
  j["measured_cost_ms"] = measured_cost_ms;
  j["bootstrap_count"] = bootstrap_count;
  j["phases"] = json::array();
  for (const auto& row : phases) {
    json r;
    r["name"] = row.name;
    r["rotations"] = row.ops.rotations;
    r["hoisted"] = row.ops.hoisted_rotations;
    r["ctpt_mult"] = row.ops.ct_pt_mults;
    r["ctct_mult"] = row.ops.ct_ct_mults;
    r["adds"] = row.ops.additions;
    r["bootstraps"] = row.ops.bootstraps;
    r["levels_in"] = row.levels_in;
    r["levels_out"] = row.levels_out;
    j["phases"].push_back(r);
  }
  j["level_trace"] = json::array();
  for (const auto& ev : level_trace) {
    json r;
    r["step"] = ev.step;
    r["block"] = ev.block;
    r["phase"] = ev.phase;
    r["level_in"] = ev.level_in;
    r["level_out"] = ev.level_out;
    if (ev.bootstrap_to)
      r["bootstrap_to"] = *ev.bootstrap_to;
    else
      r["bootstrap_to"] = nullptr;
    j["level_trace"].push_back(r);
  }
  return j.dump(indent);
}

std::string Report::to_csv() const {
  std::string out =
      "phase,rotations,hoisted,ctpt_mult,ctct_mult,adds,bootstraps,levels_in,levels_out\n";
  auto level_cell = [](int v) { return v < 0 ? std::string() : std::to_string(v); };
  auto csv_field = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  for (const auto& row : phases) {
    out += csv_field(row.name) + "," + std::to_string(row.ops.rotations) + "," +
           std::to_string(row.ops.hoisted_rotations) + "," + std::to_string(row.ops.ct_pt_mults) +
           "," + std::to_string(row.ops.ct_ct_mults) + "," + std::to_string(row.ops.additions) +
           "," + std::to_string(row.ops.bootstraps) + "," + level_cell(row.levels_in) + "," +
           level_cell(row.levels_out) + "\n";
  }
  return out;
}

void emit_report(const Report& r, const std::filesystem::path& stem) {
  if (!std::isfinite(r.max_abs_error) || !std::isfinite(r.predicted_plan_cost_ms) ||
      !std::isfinite(r.measured_cost_ms))
    throw ShapeMismatch("report: error and cost fields must be finite");
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  {
    std::ofstream out(stem.string() + ".json", std::ios::binary);
    if (!out) throw ShapeMismatch("report: cannot write " + stem.string() + ".json");
    out << r.to_json();
  }
  {
    std::ofstream out(stem.string() + ".csv", std::ios::binary);
    if (!out) throw ShapeMismatch("report: cannot write " + stem.string() + ".csv");
    out << r.to_csv();
  }
}

// --- generation ------------------------------------------------------------------------------

Report run_generation(const ModelConfig& cfg, const ModelWeights& w,
                      const std::vector<int>& prompt, int gen_len, const PlacementPlan* plan) {
  validate_model_config(cfg);
  if (prompt.empty()) throw ShapeMismatch("generation: need a nonempty prompt");
  if (gen_len < 1) throw ShapeMismatch("generation: gen_len must be >= 1");

  const int n0 = static_cast<int>(prompt.size());
  const int n_max = n0 + gen_len;
  const DecoderPlanInputs in = decoder_plan_inputs(cfg, w, n_max);
  PlacementPlan local;
  if (plan == nullptr) {
    local = solve_periodic(in.block, cfg.n_layers, in.cost, cfg.L);
    plan = &local;
  }
  // price the plan we actually run (a loaded plan carries only its actions,
  // not the solver's total); strict replay also validates its level
  // arithmetic against this chain
  std::vector<LayerSpec> unrolled;
  unrolled.reserve(static_cast<std::size_t>(11) * cfg.n_layers);
  for (int b = 0; b < cfg.n_layers; ++b)
    for (const auto& ly : in.block) unrolled.push_back(ly);
  const double step_cost = plan_cost(unrolled, in.cost, *plan, cfg.L);

  const ReferenceTrace ref = plaintext_reference(cfg, w, prompt, gen_len);

  SimBackend be({cfg.N, cfg.L});
  EncryptedState state;
  state.n_max = n_max;
  double err = 0.0;

  if (n0 > 1) {
    const std::vector<int> head(prompt.begin(), prompt.end() - 1);
    const std::vector<Vector> pre = prefill_prompt(be, cfg, w, head, state, n_max);
    for (std::size_t i = 0; i < pre.size(); ++i)
      err = std::max(err, (pre[i] - ref.final_states[i]).cwiseAbs().maxCoeff());
  } else {
    state.caches.assign(cfg.n_layers, KVCache{});
  }

  state.x = encrypt_hidden(be, cfg, w.embedding.row(prompt.back()).transpose());
  state.position = n0 - 1;

  Report rep;
  rep.config = cfg;
  rep.prompt = prompt;
  for (int step = 0; step < gen_len; ++step) {
    const std::size_t first = rep.level_trace.size();
    const Ciphertext h = run_decode_step(be, cfg, w, plan, state, &rep.level_trace, nullptr);
    for (std::size_t i = first; i < rep.level_trace.size(); ++i) rep.level_trace[i].step = step;

    const Vector hv = decode(h.slots, hidden_layout(cfg));
    const Vector logits = w.embedding * hv;
    const int pos = n0 - 1 + step;
    err = std::max(err, (hv - ref.final_states[pos]).cwiseAbs().maxCoeff());
    err = std::max(err, (logits - ref.logits[pos]).cwiseAbs().maxCoeff());

    const int tok = argmax_low(logits);
    rep.generated.push_back(tok);
    if (tok < 0 || tok >= cfg.vocab) throw ShapeMismatch("generation: token out of range");
    if (step + 1 < gen_len)
      state.x = encrypt_hidden(be, cfg, w.embedding.row(tok).transpose());
  }

  rep.max_abs_error = err;
  rep.predicted_plan_cost_ms = step_cost * gen_len;
  const OpCounts totals = be.ledger().totals();
  rep.measured_cost_ms = price_counts(totals, cfg.L);
  rep.bootstrap_count = totals.bootstraps;

  // phase rows in pipeline order, merged norm row once, then anything else
  // the ledger saw (defensive)
  std::vector<std::string> canon = {"Amortized Prefilling"};
  for (int i = 0; i < 11; ++i)
    if (i != 10) canon.push_back(kStageNames[i]);
  canon.push_back("Bootstrappings");
  std::map<std::string, OpCounts> seen;
  std::vector<std::string> order;
  for (const auto& [name, ops] : be.ledger().phase_breakdown()) {
    seen[name] = ops;
    order.push_back(name);
  }
  auto first_levels = [&](const std::string& phase, PhaseRow& row) {
    for (const auto& ev : rep.level_trace)
      if (ev.phase == phase) {
        row.levels_in = ev.level_in;
        row.levels_out = ev.level_out;
        return;
      }
  };
  for (const auto& name : canon) {
    auto it = seen.find(name);
    if (it == seen.end()) continue;
    PhaseRow row;
    row.name = name;
    row.ops = it->second;
    first_levels(name, row);
    rep.phases.push_back(row);
    seen.erase(it);
  }
  for (const auto& name : order) {
    auto it = seen.find(name);
    if (it == seen.end()) continue;
    PhaseRow row;
    row.name = name;
    row.ops = it->second;
    first_levels(name, row);
    rep.phases.push_back(row);
    seen.erase(it);
  }
  return rep;
}

Report run_generation(const ModelConfig& cfg, int n0, int gen_len) {
  const ModelWeights w = make_weights(cfg);
  const std::vector<int> prompt = seeded_prompt(cfg, n0);
  return run_generation(cfg, w, prompt, gen_len, nullptr);
}

}  // namespace slotforge
