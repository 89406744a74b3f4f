#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/harness.hpp"
#include "slotforge/kv_attention.hpp"
#include "slotforge/layouts.hpp"
#include "slotforge/nonlinear.hpp"
#include "slotforge/placement.hpp"
#include "slotforge/vmm.hpp"

using nlohmann::json;
using namespace slotforge;

namespace {

struct ReportRow {
  std::string name;
  OpCounts ops;
  int depth = -1;  // -1: not applicable
  std::string source;  // "measured" or "closed-form"
};

json row_to_json(const ReportRow& r) {
  json j{{"name", r.name},
         {"rotations", r.ops.rotations},
         {"hoisted_rotations", r.ops.hoisted_rotations},
         {"ct_pt_mults", r.ops.ct_pt_mults},
         {"ct_ct_mults", r.ops.ct_ct_mults},
         {"additions", r.ops.additions},
         {"bootstraps", r.ops.bootstraps},
         {"source", r.source}};
  if (r.depth >= 0)
    j["depth"] = r.depth;
  else
    j["depth"] = nullptr;
  return j;
}

// Writes <stem>.json and <stem>.csv next to the requested path.
void write_report(const std::string& path, const std::string& bench, const json& params,
                  const std::vector<ReportRow>& rows) {
  const std::filesystem::path p(path);
  const std::filesystem::path stem = p.parent_path() / p.stem();
  json doc{{"bench", bench}, {"params", params}, {"rows", json::array()}};
  for (const auto& r : rows) doc["rows"].push_back(row_to_json(r));
  std::ofstream(stem.string() + ".json") << doc.dump(2) << "\n";

  std::ofstream csv(stem.string() + ".csv");
  csv << "name,rotations,hoisted_rotations,ct_pt_mults,ct_ct_mults,additions,bootstraps,depth,"
         "source\n";
  for (const auto& r : rows) {
    csv << r.name << ',' << r.ops.rotations << ',' << r.ops.hoisted_rotations << ','
        << r.ops.ct_pt_mults << ',' << r.ops.ct_ct_mults << ',' << r.ops.additions << ','
        << r.ops.bootstraps << ',';
    if (r.depth >= 0) csv << r.depth;
    csv << ',' << r.source << '\n';
  }
  std::printf("report written to %s.json / %s.csv\n", stem.string().c_str(),
              stem.string().c_str());
}

void print_rows(const std::vector<ReportRow>& rows) {
  std::printf("%-28s %10s %10s %10s %10s %10s %6s  %s\n", "name", "rot", "hoisted", "ctpt",
              "ctct", "add", "depth", "source");
  for (const auto& r : rows) {
    char depth[16] = "-";
    if (r.depth >= 0) std::snprintf(depth, sizeof depth, "%d", r.depth);
    std::printf("%-28s %10lld %10lld %10lld %10lld %10lld %6s  %s\n", r.name.c_str(),
                r.ops.rotations, r.ops.hoisted_rotations, r.ops.ct_pt_mults, r.ops.ct_ct_mults,
                r.ops.additions, depth, r.source.c_str());
  }
}

// Deterministic synthetic weight; benches count operations, not values.
FunctorWeight bench_weight(int rows, int cols) {
  return FunctorWeight(rows, cols, [](int r, int c) {
    return std::sin(0.001 * (static_cast<double>(r) * 31.0 + c) + 0.25);
  });
}

SlotVector bench_vector(int N, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  SlotVector s(N);
  for (int i = 0; i < N; ++i) s[i] = dist(rng);
  return s;
}

int run_vmm_bench(int N, int d, int alpha, const std::string& scheme, bool bsgs,
                  const std::string& report) {
  const int L = 8;
  SimBackend be({N, L});
  const int cols = d * alpha;
  std::vector<ReportRow> rows;

  Ciphertext y;
  be.ledger().reset();
  if (scheme == "interleaved") {
    Layout lx = make_interleaved(padded_dim(d), N);
    Ciphertext x = be.encrypt(bench_vector(N, 42), -1, lx);
    y = vmm_interleaved(be, x, bench_weight(d, cols), {.bsgs = bsgs});
  } else if (scheme == "direct") {
    if (alpha != 1) throw ShapeMismatch("vmm-bench: the direct baseline is square-only");
    Layout lx = make_contiguous(padded_dim(d), N);
    Ciphertext x = be.encrypt(bench_vector(N, 42), -1, lx);
    y = vmm_direct(be, x, bench_weight(d, d), bsgs);
  } else if (scheme == "replicated") {
    if (alpha != 1) throw ShapeMismatch("vmm-bench: the replicated baseline is square-only");
    Layout lx = make_replicated(padded_dim(d), N);
    Ciphertext x = be.encrypt(bench_vector(N, 42), -1, lx);
    y = vmm_replicated(be, x, bench_weight(d, d), bsgs);
  } else {
    std::fprintf(stderr, "unknown scheme '%s'\n", scheme.c_str());
    return 2;
  }
  ReportRow measured{scheme + (bsgs ? "+bsgs" : ""), be.ledger().totals(), L - y.level,
                     "measured"};
  rows.push_back(measured);

  VmmCost pred;
  if (scheme == "interleaved")
    pred = predict_interleaved_cost({N, L}, d, cols, {.bsgs = bsgs});
  else if (scheme == "direct")
    pred = predict_direct_cost({N, L}, padded_dim(d), bsgs);
  else
    pred = predict_replicated_cost({N, L}, padded_dim(d), bsgs);
  ReportRow predicted{scheme + " (predicted)", {}, pred.depth, "closed-form"};
  predicted.ops.rotations = pred.rotations;
  predicted.ops.ct_pt_mults = pred.ct_pt_mults;
  rows.push_back(predicted);

  // Published square-matrix baselines, closed form only, never executed:
  // zero-padding the vector to N slots (mults = d, rotations ~ 2*sqrt(N) plus
  // the replication ladder), and offline-online with amortization window 256.
  {
    ReportRow bolt{"bolt-padding", {}, 1, "closed-form"};
    bolt.ops.ct_pt_mults = d;
    bolt.ops.rotations =
        static_cast<long long>(2.0 * std::sqrt(static_cast<double>(N))) + log2_exact(N) - 2;
    rows.push_back(bolt);
    ReportRow nexus{"nexus-offline-online", {}, 1, "closed-form"};
    const long long amortized = static_cast<long long>(d) * d / 256;
    nexus.ops.ct_pt_mults = amortized;
    nexus.ops.rotations = 2 * amortized;
    rows.push_back(nexus);
  }

  print_rows(rows);
  if (!report.empty())
    write_report(report, "vmm",
                 json{{"N", N}, {"d", d}, {"alpha", alpha}, {"scheme", scheme}, {"bsgs", bsgs}},
                 rows);
  return 0;
}

int run_attn_bench(int N, int d, int H, int n0, int nprime, const std::string& report) {
  const int L = 16;
  SimBackend be({N, L});
  AttentionConfig cfg{N, d, H, n0, std::max(nprime, 1)};
  validate_attention_config(cfg, N);
  if (n0 > nprime) throw ShapeMismatch("attn-bench: need n0 <= nprime");
  const int t = cfg.t(), dh = cfg.d_head();

  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist(0.0, 1.0);
  auto random_row = [&](int n) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
  };

  // Tokens [0, n0) stand in for the amortized prefill: encoded straight into
  // cache shape, off the ledger. Tokens [n0, nprime) go through the append
  // protocol and are charged to it.
  KVCache cache;
  auto append_token = [&](int u) {
    Layout vly = make_interleaved(d, N, u % t, H);
    vly.deferred_mask = true;
    SlotVector open(bench_vector(N, 1000 + u));  // garbage stands in for vmm output
    Ciphertext v_open = be.encrypt(std::move(open), -1, vly);
    cache = v_append(be, cache, make_v_pieces(be, v_open, cfg, u), cfg);
    Layout kly = make_interleaved(d, N, u % t, H);
    Vector krow = random_row(d);
    cache = k_append(be, cache, be.encrypt(encode(krow, kly, N), -1, kly), cfg);
  };
  for (int u = 0; u < n0; ++u) append_token(u);
  be.ledger().reset();
  {
    auto scope = be.phase("Cache append");
    for (int u = n0; u < nprime; ++u) append_token(u);
  }

  Ciphertext q = be.encrypt(encode(random_row(d), make_interleaved(d, N, 0, H), N), -1,
                            make_interleaved(d, N, 0, H));
  std::vector<Ciphertext> maps;
  {
    auto scope = be.phase("QK^T");
    maps = qk_dot(be, q, cache, cfg);
  }
  std::vector<Ciphertext> probs;
  {
    auto scope = be.phase("Softmax");
    probs = exact_softmax_maps(be, maps, cfg, cache.n_prime);
  }
  Ciphertext att;
  {
    auto scope = be.phase("Score*V");
    att = softmax_times_v(be, probs, cache, cfg);
  }

  std::vector<ReportRow> rows;
  for (const auto& [phase, ops] : be.ledger().phase_breakdown()) {
    if (phase == CostLedger::kDefaultPhase) continue;
    rows.push_back({phase, ops, -1, "measured"});
  }
  ReportRow total{"total", be.ledger().totals(), q.level - att.level, "measured"};
  rows.push_back(total);

  print_rows(rows);
  std::printf("maps=%zu key_cts=%zu groups=%zu variants/group=%d\n", maps.size(),
              cache.k_cts.size(), cache.v_cts.size(), v_variant_count(cfg));
  if (!report.empty())
    write_report(report, "attn",
                 json{{"N", N},
                      {"d", d},
                      {"H", H},
                      {"n0", n0},
                      {"nprime", nprime},
                      {"d_head", dh},
                      {"t", t},
                      {"map_cts", maps.size()},
                      {"key_cts", cache.k_cts.size()}},
                 rows);
  return 0;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ShapeMismatch("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- plan ---------------------------------------------------------------------

int run_plan(const std::string& cfg_path, int n_max, const std::string& cost_table,
             const std::string& out) {
  ModelConfig cfg = ModelConfig::from_json(slurp(cfg_path));
  validate_model_config(cfg);
  PlacementPlan plan;
  if (cost_table.empty()) {
    // calibrate by probing one decode step over seeded weights
    plan = plan_decode(cfg, make_weights(cfg), n_max);
  } else {
    json t = json::parse(slurp(cost_table));
    CostModel cost(t.at("layer_ms").get<std::vector<std::vector<double>>>(),
                   t.at("boot_ms").get<std::vector<double>>());
    plan = solve_periodic(decoder_layer_specs(cfg, n_max), cfg.n_layers, cost, cfg.L);
  }
  std::ofstream(out) << plan.to_json() << "\n";
  std::printf("plan written to %s\n", out.c_str());
  std::printf("stages=%zu bootstraps=%d terminal_level=%d step_cost_ms=%.3f\n",
              plan.entries.size(), plan.bootstrap_count, plan.terminal_level, plan.total_cost);
  return 0;
}

// --- decode -------------------------------------------------------------------

int run_decode(const std::string& model_path, const std::string& weights_dir, int n0, int gen,
               const std::string& plan_path, const std::string& mode,
               const std::string& report) {
  ModelConfig cfg;
  if (!model_path.empty()) cfg = ModelConfig::from_json(slurp(model_path));
  if (!mode.empty()) {
    if (mode == "exact")
      cfg.mode = NonlinearMode::Exact;
    else if (mode == "approx")
      cfg.mode = NonlinearMode::Approx;
    else {
      std::fprintf(stderr, "unknown mode '%s'\n", mode.c_str());
      return 2;
    }
  }
  validate_model_config(cfg);

  ModelWeights w;
  if (weights_dir.empty()) {
    w = make_weights(cfg);
  } else if (std::filesystem::exists(std::filesystem::path(weights_dir) / "embedding.bin")) {
    w = load_weights(weights_dir, cfg);
  } else {
    w = make_weights(cfg);
    save_weights(weights_dir, w);
    std::printf("seeded weights written to %s\n", weights_dir.c_str());
  }

  std::optional<PlacementPlan> plan;
  if (!plan_path.empty()) plan = PlacementPlan::from_json(slurp(plan_path));

  const std::vector<int> prompt = seeded_prompt(cfg, n0);
  const Report rep = run_generation(cfg, w, prompt, gen, plan ? &*plan : nullptr);

  auto print_tokens = [](const char* label, const std::vector<int>& ts) {
    std::printf("%s", label);
    for (int t : ts) std::printf(" %d", t);
    std::printf("\n");
  };
  print_tokens("prompt   :", rep.prompt);
  print_tokens("generated:", rep.generated);
  std::printf("max |error| vs plaintext = %.3e\n", rep.max_abs_error);
  std::printf("bootstraps=%lld measured_ms=%.3f planned_ms=%.3f\n", rep.bootstrap_count,
              rep.measured_cost_ms, rep.predicted_plan_cost_ms);
  if (!report.empty()) {
    const std::filesystem::path p(report);
    const std::filesystem::path stem = p.parent_path() / p.stem();
    emit_report(rep, stem);
    std::printf("report written to %s.json / %s.csv\n", stem.string().c_str(),
                stem.string().c_str());
  }
  return 0;
}

// --- verify -------------------------------------------------------------------

struct Checker {
  int passed = 0;
  int failed = 0;
  void operator()(const std::string& name, bool ok, const std::string& detail = "") {
    if (ok) {
      ++passed;
      std::printf("PASS %s\n", name.c_str());
    } else {
      ++failed;
      std::printf("FAIL %s%s%s\n", name.c_str(), detail.empty() ? "" : " — ", detail.c_str());
    }
  }
};

void verify_vmm(Checker& ck) {
  {
    SimBackend be({32768, 8});
    const Layout lx = make_interleaved(4096, 32768);
    Ciphertext x = be.encrypt(bench_vector(32768, 42), -1, lx);
    Ciphertext y = vmm_interleaved(be, x, bench_weight(4096, 4096), {.bsgs = true});
    const OpCounts t = be.ledger().totals();
    ck("vmm: paper-scale ct-pt count is exactly d*d/N", t.ct_pt_mults == 512,
       "got " + std::to_string(t.ct_pt_mults));
    ck("vmm: paper-scale rotations land in the BSGS envelope",
       t.rotations >= 50 && t.rotations <= 54, "got " + std::to_string(t.rotations));
    ck("vmm: one level consumed", x.level - y.level == 1);
  }
  {
    const VmmCost c2 = predict_interleaved_cost({32768, 8}, 2048, 2048, {.bsgs = true});
    ck("vmm: d=2048 rotation envelope", c2.rotations >= 28 && c2.rotations <= 32,
       "got " + std::to_string(c2.rotations));
    const VmmCost c3 = predict_interleaved_cost({32768, 8}, 768, 768, {.bsgs = true});
    ck("vmm: d=768 rotation envelope", c3.rotations >= 18 && c3.rotations <= 22,
       "got " + std::to_string(c3.rotations));
    const VmmCost cd = predict_direct_cost({32768, 8}, 4096, true);
    ck("vmm: direct baseline rotation envelope", cd.rotations >= 248 && cd.rotations <= 256,
       "got " + std::to_string(cd.rotations));
    const VmmCost cr = predict_replicated_cost({32768, 8}, 4096, true);
    ck("vmm: replicated baseline rotation envelope", cr.rotations >= 99 && cr.rotations <= 107,
       "got " + std::to_string(cr.rotations));
  }
  {
    SimBackend be({256, 8});
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist(0.0, 1.0);
    const int d = 16, cols = 32;
    Vector v(d);
    for (int i = 0; i < d; ++i) v[i] = dist(rng);
    Matrix W(d, cols);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < cols; ++c) W(r, c) = dist(rng);
    const Layout lx = make_interleaved(d, 256);
    Ciphertext x = be.encrypt(encode(v, lx, 256), -1, lx);
    Ciphertext y = vmm_interleaved(be, x, MatrixWeight(W), {.bsgs = true});
    const Vector got = decode(y.slots, *y.layout);
    const Vector want = W.transpose() * v;
    ck("vmm: rectangular product matches dense algebra",
       (got - want).cwiseAbs().maxCoeff() < 1e-9);
  }
}

void verify_attn(Checker& ck) {
  const int N = 256, d = 64, H = 4, n = 21;
  const AttentionConfig cfg{N, d, H, 0, 33};
  const int t = cfg.t(), dh = cfg.d_head();
  SimBackend be({N, 16});
  std::mt19937_64 rng(9);
  std::normal_distribution<double> dist(0.0, 1.0);
  auto row = [&] {
    Vector v(d);
    for (int i = 0; i < d; ++i) v[i] = dist(rng);
    return v;
  };

  KVCache cache;
  std::vector<Vector> krows, vrows;
  bool append_costs_ok = true;
  for (int u = 0; u < n; ++u) {
    krows.push_back(row());
    vrows.push_back(row());
    const Layout kly = make_interleaved(d, N, u % t, H);
    Layout vly = kly;
    vly.deferred_mask = true;
    const OpCounts before = be.ledger().totals();
    cache = v_append(be, cache,
                     make_v_pieces(be, be.encrypt(encode(vrows[u], vly, N), -1, vly), cfg, u), cfg);
    cache = k_append(be, cache, be.encrypt(encode(krows[u], kly, N), -1, kly), cfg);
    const OpCounts after = be.ledger().totals();
    if (after.ct_pt_mults - before.ct_pt_mults != d / H) append_costs_ok = false;
  }
  ck("attn: each append pays d/H value mults", append_costs_ok);

  const Vector qrow = row();
  const Layout qly = make_interleaved(d, N, 0, H);
  Ciphertext q = be.encrypt(encode(qrow, qly, N), -1, qly);
  const OpCounts before = be.ledger().totals();
  std::vector<Ciphertext> maps = qk_dot(be, q, cache, cfg);
  const OpCounts after = be.ledger().totals();
  ck("attn: score pass uses ceil(n'/t) ct-ct mults",
     after.ct_ct_mults - before.ct_ct_mults == (n + t - 1) / t,
     "got " + std::to_string(after.ct_ct_mults - before.ct_ct_mults));
  ck("attn: score pass consumes two levels", q.level - maps.front().level == 2);

  std::vector<Ciphertext> probs = exact_softmax_maps(be, maps, cfg, cache.n_prime);
  Ciphertext att = softmax_times_v(be, probs, cache, cfg);
  ck("attn: value pass consumes two levels", probs.front().level - att.level == 2);

  Vector want = Vector::Zero(d);
  for (int h = 0; h < H; ++h) {
    Vector sc(n);
    for (int j = 0; j < n; ++j) sc[j] = qrow.segment(h * dh, dh).dot(krows[j].segment(h * dh, dh));
    Vector p = (sc.array() - sc.maxCoeff()).exp();
    p /= p.sum();
    for (int j = 0; j < n; ++j) want.segment(h * dh, dh) += p[j] * vrows[j].segment(h * dh, dh);
  }
  const Vector got = decode(att.slots, *att.layout);
  ck("attn: decoded attention matches the plaintext head sums",
     (got - want).cwiseAbs().maxCoeff() < 1e-9);
}

void verify_nonlinear(Checker& ck) {
  auto bits = [](double rmse) { return -std::log2(rmse); };
  {
    SimBackend be({64, 32});
    const ApproxSpec spec = desk_spec("desk-default", "softmax");
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> dist(spec.domain_lo + 2.0, spec.domain_hi - 0.2);
    const int n = 24;
    SlotVector s = SlotVector::Zero(64);
    std::vector<double> ref(n);
    for (int i = 0; i < n; ++i) ref[i] = s[i] = dist(rng);
    const double mx = *std::max_element(ref.begin(), ref.end());
    double z = 0.0;
    for (double& v : ref) z += v = std::exp(v - mx);
    for (double& v : ref) v /= z;
    Ciphertext out = approx_softmax(be, be.encrypt(s), n, spec);
    double rmse = 0.0;
    for (int i = 0; i < n; ++i) rmse += (out.slots[i] - ref[i]) * (out.slots[i] - ref[i]);
    rmse = std::sqrt(rmse / n);
    ck("nonlinear: softmax kernel clears eight bits", bits(rmse) >= 8.0,
       "got " + std::to_string(bits(rmse)));
  }
  {
    SimBackend be({64, 32});
    const ApproxSpec spec = desk_spec("desk-default", "norm");
    const int d = 16;
    const Layout ly = make_interleaved(d, 64);
    std::mt19937_64 rng(18);
    std::normal_distribution<double> dist(0.0, 1.0);
    double rmse = 0.0;
    int terms = 0;
    for (int trial = 0; trial < 4; ++trial) {
      Vector x(d), gamma(d), beta(d);
      for (int i = 0; i < d; ++i) {
        x[i] = dist(rng) + 0.3;
        gamma[i] = 1.0 + 0.2 * dist(rng);
        beta[i] = 0.1 * dist(rng);
      }
      Ciphertext out =
          approx_norm(be, be.encrypt(encode(x, ly, 64), -1, ly), gamma, beta, 1e-5, spec);
      const double mean = x.mean();
      const double var = (x.array() - mean).square().mean();
      const Vector got = decode(out.slots, ly);
      for (int i = 0; i < d; ++i) {
        const double ref = (x[i] - mean) / std::sqrt(var + 1e-5) * gamma[i] + beta[i];
        rmse += (got[i] - ref) * (got[i] - ref);
        ++terms;
      }
    }
    rmse = std::sqrt(rmse / terms);
    ck("nonlinear: norm kernel clears eight bits", bits(rmse) >= 8.0,
       "got " + std::to_string(bits(rmse)));
  }
  {
    SimBackend be({64, 16});
    const ApproxSpec spec = desk_spec("desk-default", "silu");
    std::mt19937_64 rng(19);
    std::uniform_real_distribution<double> dist(spec.domain_lo, spec.domain_hi);
    SlotVector s(64);
    for (int i = 0; i < 64; ++i) s[i] = dist(rng);
    Ciphertext c = be.encrypt(s);
    Ciphertext out = approx_silu(be, c, spec);
    double rmse = 0.0;
    for (int i = 0; i < 64; ++i) {
      const double ref = s[i] / (1.0 + std::exp(-s[i]));
      rmse += (out.slots[i] - ref) * (out.slots[i] - ref);
    }
    rmse = std::sqrt(rmse / 64);
    ck("nonlinear: silu kernel clears ten bits", bits(rmse) >= 10.0,
       "got " + std::to_string(bits(rmse)));
  }
}

// Brute-force DFS over every source-to-terminal path of a level graph,
// mirroring the solver's tie-break order (cost, then fewer bootstraps, then
// higher terminal level).
struct PathBest {
  double cost = 0;
  int nboots = 0;
  int term = 0;
};

std::optional<PathBest> enumerate_paths(const LevelGraph& g) {
  const int D = static_cast<int>(g.layers.size());
  std::map<std::pair<int, int>, std::vector<const LevelEdge*>> adj;
  std::vector<const LevelEdge*> source;
  for (const auto& e : g.edges) {
    if (e.layer < 0)
      source.push_back(&e);
    else
      adj[{e.layer, e.from}].push_back(&e);
  }
  std::optional<PathBest> best;
  std::function<void(int, int, double, int)> dfs = [&](int i, int x, double cost, int nboots) {
    if (i == D) {
      const PathBest k{cost, nboots, x};
      if (!best || k.cost < best->cost ||
          (k.cost == best->cost &&
           (k.nboots < best->nboots || (k.nboots == best->nboots && k.term > best->term))))
        best = k;
      return;
    }
    auto it = adj.find({i, x});
    if (it == adj.end()) return;
    for (const LevelEdge* e : it->second)
      dfs(i + 1, e->to, cost + e->weight, nboots + (e->bootstrap ? 1 : 0));
  };
  for (const LevelEdge* e : source) dfs(0, e->to, e->weight, 0);
  return best;
}

void verify_placement(Checker& ck) {
  std::mt19937 rng(77);
  std::uniform_int_distribution<int> pick_L(2, 5), pick_d1(1, 4), pick_d2(1, 2);
  std::uniform_int_distribution<int> start(1, 50), step(1, 40), bstart(20, 120), bstep(1, 60);
  bool all_match = true;
  std::string detail;
  for (int trial = 0; trial < 10; ++trial) {
    const int L = pick_L(rng), d1 = pick_d1(rng), d2 = pick_d2(rng);
    std::uniform_int_distribution<int> pick_depth(0, std::min(2, L));
    std::vector<LayerSpec> block;
    for (int j = 0; j < d1; ++j) {
      LayerSpec ly;
      ly.name = "b" + std::to_string(j);
      ly.depth = pick_depth(rng);
      ly.cost_id = j;
      block.push_back(ly);
    }
    std::vector<LayerSpec> unrolled;
    for (int k = 0; k < d2; ++k)
      for (const auto& ly : block) unrolled.push_back(ly);
    std::vector<std::vector<double>> layer_ms(d1);
    for (auto& rw : layer_ms) {
      rw.resize(L + 1);
      rw[0] = start(rng);
      for (int x = 1; x <= L; ++x) rw[x] = rw[x - 1] + step(rng);
    }
    std::vector<double> boot(L + 1, 0.0);
    boot[1] = bstart(rng);
    for (int y = 2; y <= L; ++y) boot[y] = boot[y - 1] + bstep(rng);
    const CostModel cost(std::move(layer_ms), std::move(boot));

    const LevelGraph g = build_graph(unrolled, cost, L);
    const auto best = enumerate_paths(g);
    const PlacementPlan plan = solve(prune_graph(g));
    if (!best || plan.total_cost != best->cost || plan.bootstrap_count != best->nboots ||
        plan.terminal_level != best->term) {
      all_match = false;
      detail = "trial " + std::to_string(trial);
      break;
    }
    if (plan_cost(unrolled, cost, plan, L) != plan.total_cost) {
      all_match = false;
      detail = "replay mismatch at trial " + std::to_string(trial);
      break;
    }
  }
  ck("placement: pruned solver matches exhaustive enumeration on seeded chains", all_match,
     detail);

  ModelConfig cfg;
  const PlacementPlan plan = plan_decode(cfg, make_weights(cfg), 16);
  ck("placement: decoder plan covers every stage",
     plan.entries.size() == static_cast<std::size_t>(11 * cfg.n_layers));
  ck("placement: decoder plan bootstraps at least once", plan.bootstrap_count >= 1);
}

int run_verify(const std::string& suite) {
  Checker ck;
  bool known = false;
  if (suite == "all" || suite == "vmm") {
    verify_vmm(ck);
    known = true;
  }
  if (suite == "all" || suite == "attn") {
    verify_attn(ck);
    known = true;
  }
  if (suite == "all" || suite == "nonlinear") {
    verify_nonlinear(ck);
    known = true;
  }
  if (suite == "all" || suite == "placement") {
    verify_placement(ck);
    known = true;
  }
  if (!known) {
    std::fprintf(stderr, "unknown suite '%s'\n", suite.c_str());
    return 2;
  }
  std::printf("%d passed, %d failed\n", ck.passed, ck.failed);
  return ck.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slotforge: slot-SIMD packing simulator for private transformer inference"};
  app.require_subcommand(1);

  // vmm-bench
  int vN = 32768, vd = 4096, valpha = 1;
  std::string vscheme = "interleaved", vreport;
  bool vbsgs = false;
  auto* vmm = app.add_subcommand("vmm-bench", "count report for one matrix-vector scheme");
  vmm->add_option("--N", vN, "slot count (power of two)")->required();
  vmm->add_option("--d", vd, "model width")->required();
  vmm->add_option("--alpha", valpha, "output/input aspect ratio (interleaved only)")
      ->default_val(1);
  vmm->add_option("--scheme", vscheme, "direct|replicated|interleaved")->required();
  vmm->add_flag("--bsgs", vbsgs, "baby-step/giant-step grouping");
  vmm->add_option("--report", vreport, "report path stem (.json and .csv)");

  // attn-bench
  int aN = 256, ad = 64, aH = 4, an0 = 8, anprime = 16;
  std::string areport;
  auto* attn = app.add_subcommand("attn-bench", "count report for cached attention");
  attn->add_option("--N", aN, "slot count (power of two)")->required();
  attn->add_option("--d", ad, "model width")->required();
  attn->add_option("--H", aH, "head count")->required();
  attn->add_option("--n0", an0, "tokens preloaded off-ledger (prefill stand-in)")->required();
  attn->add_option("--nprime", anprime, "cache size for the measured decode step")->required();
  attn->add_option("--report", areport, "report path stem (.json and .csv)");

  // plan
  std::string pcfg, pcost, pout;
  int pnmax = 16;
  auto* plan = app.add_subcommand("plan", "solve bootstrap placement for a decode step");
  plan->add_option("--model-cfg", pcfg, "model config JSON")->required();
  plan->add_option("--n-max", pnmax, "cache capacity the plan is sized for")->default_val(16);
  plan->add_option("--cost-table", pcost,
                   "explicit cost table JSON {layer_ms: [[...]...], boot_ms: [...]}; "
                   "omit to calibrate by probing a decode step over seeded weights");
  plan->add_option("--out", pout, "output plan JSON path")->required();

  // decode
  std::string dmodel, dweights, dplan, dmode, dreport;
  int dn0 = 8, dgen = 4;
  auto* dec = app.add_subcommand("decode", "run encrypted generation against the plaintext model");
  dec->add_option("--model", dmodel, "model config JSON (defaults apply when omitted)");
  dec->add_option("--weights", dweights,
                  "weight directory; populated with seeded weights when missing");
  dec->add_option("--n0", dn0, "prompt length (seeded tokens)")->default_val(8);
  dec->add_option("--gen", dgen, "tokens to generate")->default_val(4);
  dec->add_option("--plan", dplan, "placement plan JSON (default: solve per run)");
  dec->add_option("--mode", dmode, "exact|approx (overrides the config)");
  dec->add_option("--report", dreport, "report path stem (.json and .csv)");

  // verify
  std::string vsuite = "all";
  auto* ver = app.add_subcommand("verify", "self-checks with one PASS/FAIL line per property");
  ver->add_option("--suite", vsuite, "all|vmm|attn|nonlinear|placement")->default_val("all");

  CLI11_PARSE(app, argc, argv);

  try {
    if (vmm->parsed()) return run_vmm_bench(vN, vd, valpha, vscheme, vbsgs, vreport);
    if (attn->parsed()) return run_attn_bench(aN, ad, aH, an0, anprime, areport);
    if (plan->parsed()) return run_plan(pcfg, pnmax, pcost, pout);
    if (dec->parsed()) return run_decode(dmodel, dweights, dn0, dgen, dplan, dmode, dreport);
    if (ver->parsed()) return run_verify(vsuite);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
