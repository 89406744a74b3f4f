#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/nonlinear.hpp"
#include "slotforge/placement.hpp"

using namespace slotforge;

namespace {

LayerSpec layer(const std::string& name, int depth, int cost_id, int ct_count = 1) {
  LayerSpec ly;
  ly.name = name;
  ly.depth = depth;
  ly.cost_id = cost_id;
  ly.ct_count = ct_count;
  return ly;
}

std::vector<LayerSpec> chain(const std::vector<int>& depths) {
  std::vector<LayerSpec> out;
  for (std::size_t i = 0; i < depths.size(); ++i)
    out.push_back(layer("layer" + std::to_string(i), depths[i], static_cast<int>(i)));
  return out;
}

// Integer-valued strictly increasing tables: sums stay exact in doubles, so
// solver-vs-oracle comparisons can use ==.
CostModel random_cost(std::mt19937& rng, int n_ids, int L) {
  std::uniform_int_distribution<int> start(1, 50), step(1, 40);
  std::uniform_int_distribution<int> bstart(20, 120), bstep(1, 60);
  std::vector<std::vector<double>> layer_ms(n_ids);
  for (auto& row : layer_ms) {
    row.resize(L + 1);
    row[0] = start(rng);
    for (int x = 1; x <= L; ++x) row[x] = row[x - 1] + step(rng);
  }
  std::vector<double> boot(L + 1, 0.0);
  if (L >= 1) boot[1] = bstart(rng);
  for (int y = 2; y <= L; ++y) boot[y] = boot[y - 1] + bstep(rng);
  return CostModel(std::move(layer_ms), std::move(boot));
}

struct Instance {
  std::vector<LayerSpec> block;
  int d2 = 1;
  int L = 1;
  CostModel cost;
  std::vector<LayerSpec> unrolled;
};

Instance random_instance(std::mt19937& rng, int max_L, int max_d1, int max_d2) {
  std::uniform_int_distribution<int> pick_L(2, max_L), pick_d1(1, max_d1), pick_d2(1, max_d2);
  int L = pick_L(rng), d1 = pick_d1(rng), d2 = pick_d2(rng);
  std::uniform_int_distribution<int> pick_depth(0, std::min(4, L)), pick_ct(1, 2);
  std::vector<LayerSpec> block;
  for (int j = 0; j < d1; ++j) {
    LayerSpec ly = layer("b" + std::to_string(j), pick_depth(rng), j, pick_ct(rng));
    block.push_back(ly);
  }
  Instance inst{block, d2, L, random_cost(rng, d1, L), {}};
  for (int k = 0; k < d2; ++k)
    for (const auto& ly : block) inst.unrolled.push_back(ly);
  return inst;
}

// Full path key under the solver's tie-break order.
struct PathKey {
  double cost = 0;
  int nboots = 0;
  int term = 0;
  std::vector<int> boots;
  bool beats(const PathKey& o) const {
    if (cost != o.cost) return cost < o.cost;
    if (nboots != o.nboots) return nboots < o.nboots;
    if (term != o.term) return term > o.term;
    return boots < o.boots;
  }
};

// Brute-force DFS over every source-to-terminal path; throws past the cap.
std::optional<PathKey> enumerate_best(const LevelGraph& g, long long cap = 1000000) {
  int D = static_cast<int>(g.layers.size());
  // bucket edges by (layer, from level)
  std::map<std::pair<int, int>, std::vector<const LevelEdge*>> adj;
  std::vector<const LevelEdge*> source;
  for (const auto& e : g.edges) {
    if (e.layer < 0)
      source.push_back(&e);
    else
      adj[{e.layer, e.from}].push_back(&e);
  }
  std::optional<PathKey> best;
  long long paths = 0;
  std::vector<int> boots;
  std::function<void(int, int, double)> dfs = [&](int i, int x, double cost) {
    if (i == D) {
      if (++paths > cap) throw std::runtime_error("path cap exceeded");
      PathKey k{cost, static_cast<int>(boots.size()), x, boots};
      if (!best || k.beats(*best)) best = k;
      return;
    }
    auto it = adj.find({i, x});
    if (it == adj.end()) return;
    for (const LevelEdge* e : it->second) {
      if (e->bootstrap) boots.push_back(i + 1);
      dfs(i + 1, e->to, cost + e->weight);
      if (e->bootstrap) boots.pop_back();
    }
  };
  for (const LevelEdge* e : source) dfs(0, e->to, e->weight);
  return best;
}

std::vector<int> plan_boot_positions(const PlacementPlan& plan) {
  std::vector<int> out;
  for (const auto& e : plan.entries)
    if (e.bootstrap_to) out.push_back(e.index + 1);
  return out;
}

// least-squares y = a + b*x; returns {slope, r_squared}
std::pair<double, double> fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double a = (sy - b * sx) / n;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double fit = a + b * xs[i];
    ss_res += (ys[i] - fit) * (ys[i] - fit);
    ss_tot += (ys[i] - sy / n) * (ys[i] - sy / n);
  }
  return {b, 1.0 - ss_res / ss_tot};
}

// Drives a plan through the simulator: each level of depth is one ct-pt
// multiplication; actions follow the plan.
void execute_plan(const std::vector<LayerSpec>& layers, const PlacementPlan& plan, int N, int L) {
  SimBackend be({N, L});
  Ciphertext ct = be.encrypt(SlotVector::Constant(N, 0.5));
  if (plan.entries.at(0).input_level < L) ct = be.level_drop(ct, plan.entries[0].input_level);
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    const auto& e = plan.entries[i];
    REQUIRE(ct.level == e.input_level);
    for (int d = 0; d < layers[i].depth; ++d) ct = be.mul_plain(ct, 1.0);
    if (e.bootstrap_to) ct = be.bootstrap(ct, *e.bootstrap_to);
    if (e.drop_to) ct = be.level_drop(ct, *e.drop_to);
  }
  CHECK(ct.level == plan.terminal_level);
  CHECK(be.ledger().totals().bootstraps == plan.bootstrap_count);
}

}  // namespace

TEST_CASE("calibration units match the measured tables") {
  const OpUnitCosts u = calibration_units();
  // least-squares through the origin against (level + 1), in ms
  CHECK(u.add == doctest::Approx(0.0023987073170732).epsilon(1e-9));
  CHECK(u.ctpt_mult == doctest::Approx(0.0143608292682927).epsilon(1e-9));
  CHECK(u.ctct_mult == doctest::Approx(0.0575382682926829).epsilon(1e-9));
  CHECK(u.rotation == doctest::Approx(0.0432474878048780).epsilon(1e-9));

  // bootstrap table: exact at the measured points, linear between, extrapolated past the end
  CHECK(calibrated_boot_ms(1) == doctest::Approx(51.30));
  CHECK(calibrated_boot_ms(4) == doctest::Approx(66.88));
  CHECK(calibrated_boot_ms(13) == doctest::Approx(125.58));
  CHECK(calibrated_boot_ms(2) == doctest::Approx(56.4933333333));
  CHECK(calibrated_boot_ms(8) == doctest::Approx(91.90));
  CHECK(calibrated_boot_ms(15) == doctest::Approx(139.3533333333));
  for (int y = 1; y < 20; ++y) CHECK(calibrated_boot_ms(y + 1) > calibrated_boot_ms(y));
  CHECK_THROWS_AS(calibrated_boot_ms(0), InvalidTarget);
}

TEST_CASE("cost model construction and pricing") {
  SUBCASE("linear base model") {
    CostModel m = CostModel::linear({2.0, 5.0}, 13);
    CHECK(m.n_ids() == 2);
    CHECK(m.max_level() == 13);
    CHECK(m.layer_time(0, 0) == doctest::Approx(2.0));
    CHECK(m.layer_time(0, 13) == doctest::Approx(28.0));
    CHECK(m.layer_time(1, 3) == doctest::Approx(20.0));
    CHECK(m.boot_time(4) == doctest::Approx(66.88));
  }
  SUBCASE("calibrated from operation counts") {
    OpCounts c;
    c.additions = 2;
    c.ct_pt_mults = 1;
    c.rotations = 3;
    CostModel m = CostModel::calibrated({c}, 13);
    const OpUnitCosts u = calibration_units();
    const double base = 2 * u.add + u.ctpt_mult + 3 * u.rotation;
    CHECK(m.layer_time(0, 0) == doctest::Approx(base).epsilon(1e-12));
    CHECK(m.layer_time(0, 3) == doctest::Approx(4 * base).epsilon(1e-12));
  }
  SUBCASE("scaled rows") {
    CostModel m = CostModel::linear({12.0}, 13);
    const int id = m.add_scaled(0, 4.0 / 12.0);
    CHECK(id == 1);
    CHECK(m.layer_time(1, 0) == doctest::Approx(4.0));
    CHECK(m.layer_time(1, 10) == doctest::Approx(44.0));
  }
  SUBCASE("monotonicity is enforced") {
    CHECK_THROWS_AS(CostModel({{3.0, 2.0, 1.0}}, {0.0, 1.0, 2.0}), ShapeMismatch);
    CHECK_THROWS_AS(CostModel({{1.0, 2.0, 3.0}}, {0.0, 5.0, 4.0}), ShapeMismatch);
    CHECK_THROWS_AS(CostModel({{1.0, 2.0}}, {0.0, 1.0, 2.0}), ShapeMismatch);  // row size
  }
}

TEST_CASE("graph shape: single layer") {
  CostModel m = CostModel::linear({1.0}, 2);
  LevelGraph g = build_graph({layer("only", 1, 0)}, m, 2);
  // input vertices at levels {1, 2}: two source edges, two terminal edges
  CHECK(g.edge_count() == 4);
  std::vector<int> inputs, terms;
  for (const auto& e : g.edges) {
    CHECK(!e.bootstrap);
    if (e.layer == -1) {
      CHECK(e.weight == 0.0);
      inputs.push_back(e.to);
    } else {
      CHECK(e.layer == 0);
      CHECK(e.to == e.from - 1);
      terms.push_back(e.to);
    }
  }
  std::sort(inputs.begin(), inputs.end());
  std::sort(terms.begin(), terms.end());
  CHECK(inputs == std::vector<int>{1, 2});
  CHECK(terms == std::vector<int>{0, 1});

  CHECK_THROWS_AS(build_graph({layer("deep", 3, 0)}, m, 2), InfeasibleLayer);
}

TEST_CASE("graph shape: three layer chain") {
  CostModel m = CostModel::linear({1.0}, std::vector<double>{0.0, 10.0, 20.0});
  std::vector<LayerSpec> layers = {layer("a", 1, 0), layer("b", 1, 0), layer("c", 1, 0)};
  LevelGraph g = build_graph(layers, m, 2);
  CHECK(g.edge_count() == 12);  // 2 source + 4 + 4 boundary + 2 terminal

  // construction audit: bootstrap flag and weight follow the edge formula
  for (const auto& e : g.edges) {
    if (e.layer == -1) continue;
    const int p = e.from - g.layers[e.layer].depth;
    const bool last = e.layer == 2;
    CHECK(e.bootstrap == (!last && e.to > p));
    double w = m.layer_time(0, e.from);
    if (e.bootstrap) w += g.layers[e.layer + 1].ct_count * m.boot_time(e.to);
    CHECK(e.weight == doctest::Approx(w));
    if (!e.bootstrap && !last) CHECK(e.to <= p);  // exact or free drop
  }

  LevelGraph p = prune_graph(g);
  CHECK(p.pruned);
  CHECK(p.edge_count() == 10);  // each boundary keeps one exact edge + two zero-level bootstraps
  for (const auto& e : p.edges) {
    if (e.layer == -1 || e.layer == 2) continue;
    const int post = e.from - p.layers[e.layer].depth;
    const bool exact = !e.bootstrap && e.to == post;
    const bool boot_at_zero = e.bootstrap && post == 0;
    CHECK((exact || boot_at_zero));
  }

  // frozen optimum: enter at 2, run down, bootstrap to 1 before the last layer
  for (const LevelGraph* gr : {&g, &p}) {
    PlacementPlan plan = solve(*gr);
    CHECK(plan.total_cost == doctest::Approx(17.0));
    CHECK(plan.bootstrap_count == 1);
    CHECK(plan.terminal_level == 0);
    REQUIRE(plan.entries.size() == 3);
    CHECK(plan.entries[0].input_level == 2);
    CHECK(!plan.entries[0].bootstrap_to);
    CHECK(plan.entries[1].input_level == 1);
    REQUIRE(plan.entries[1].bootstrap_to.has_value());
    CHECK(*plan.entries[1].bootstrap_to == 1);
    CHECK(plan.entries[2].input_level == 1);
    CHECK(plan_cost(gr->layers, m, plan, 2) == doctest::Approx(17.0));
  }

  // the enumerator agrees, including tie-break fields
  auto best = enumerate_best(g);
  REQUIRE(best.has_value());
  CHECK(best->cost == doctest::Approx(17.0));
  CHECK(best->nboots == 1);
  CHECK(best->term == 0);
}

TEST_CASE("edge audit and pruned edge bound on random graphs") {
  std::mt19937 rng(411);
  for (int trial = 0; trial < 10; ++trial) {
    Instance inst = random_instance(rng, 8, 5, 2);
    LevelGraph g = build_graph(inst.unrolled, inst.cost, inst.L);
    const int D = static_cast<int>(inst.unrolled.size());
    for (const auto& e : g.edges) {
      if (e.layer == -1) {
        CHECK(e.weight == 0.0);
        CHECK(e.to >= g.layers[0].depth);
        continue;
      }
      const auto& ly = g.layers[e.layer];
      CHECK(e.from >= ly.depth);
      CHECK(e.from <= inst.L);
      const int post = e.from - ly.depth;
      if (e.layer == D - 1) {
        CHECK(e.to == post);
      } else {
        CHECK(e.bootstrap == (e.to > post));
        double w = inst.cost.layer_time(ly.cost_id, e.from);
        if (e.bootstrap) w += g.layers[e.layer + 1].ct_count * inst.cost.boot_time(e.to);
        CHECK(e.weight == doctest::Approx(w));
      }
    }
    LevelGraph pg = prune_graph(g);
    CHECK(pg.edge_count() <= g.edge_count());
    CHECK(pg.edge_count() <= static_cast<std::size_t>(3 * (inst.L + 1) * (D + 1)));
  }
}

TEST_CASE("solver matches exhaustive path enumeration") {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<int> pick_L(1, 4), pick_d1(1, 3), pick_d2(1, 2);
    int L = pick_L(rng), d1 = pick_d1(rng), d2 = pick_d2(rng);
    std::uniform_int_distribution<int> pick_depth(0, std::min(2, L));
    std::vector<LayerSpec> block;
    for (int j = 0; j < d1; ++j) block.push_back(layer("b" + std::to_string(j), pick_depth(rng), j));
    std::vector<LayerSpec> unrolled;
    for (int k = 0; k < d2; ++k)
      for (const auto& ly : block) unrolled.push_back(ly);
    CostModel cost = random_cost(rng, d1, L);

    LevelGraph g = build_graph(unrolled, cost, L);
    auto best = enumerate_best(g);
    REQUIRE(best.has_value());
    PlacementPlan plan = solve(g);
    CHECK(plan.total_cost == best->cost);
    CHECK(plan.bootstrap_count == best->nboots);
    CHECK(plan.terminal_level == best->term);
    CHECK(plan_boot_positions(plan) == best->boots);
  }
}

TEST_CASE("zero-depth layers never bootstrap") {
  CostModel m = CostModel::linear({3.0, 4.0, 5.0}, 3);
  std::vector<LayerSpec> layers = {layer("a", 0, 0), layer("b", 0, 1), layer("c", 0, 2)};
  PlacementPlan plan = solve(prune_graph(build_graph(layers, m, 3)));
  CHECK(plan.bootstrap_count == 0);
  CHECK(plan.terminal_level == 0);
  CHECK(plan.total_cost == doctest::Approx(12.0));  // every layer runs at level 0
  for (const auto& e : plan.entries) {
    CHECK(e.input_level == 0);
    CHECK(!e.bootstrap_to);
    CHECK(!e.drop_to);
  }
}

TEST_CASE("pruned and periodic solvers match the unpruned oracle") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Instance inst = random_instance(rng, 10, 12, 6);
    LevelGraph full = build_graph(inst.unrolled, inst.cost, inst.L);
    PlacementPlan oracle = solve(full);
    PlacementPlan pruned = solve(prune_graph(full));
    PlacementPlan periodic = solve_periodic(inst.block, inst.d2, inst.cost, inst.L);

    // integer-valued costs: equality is exact
    CHECK(pruned.total_cost == oracle.total_cost);
    CHECK(periodic.total_cost == oracle.total_cost);

    for (const PlacementPlan* p : {&oracle, &pruned, &periodic}) {
      CHECK(p->entries.size() == inst.unrolled.size());
      CHECK(plan_cost(inst.unrolled, inst.cost, *p, inst.L) == p->total_cost);
    }
  }
}

TEST_CASE("plans execute on the slot engine") {
  CostModel m = CostModel::linear({1.0, 1.0, 1.0}, 4);
  std::vector<LayerSpec> layers = {layer("a", 2, 0), layer("b", 3, 1), layer("c", 1, 2)};
  PlacementPlan plan = solve(prune_graph(build_graph(layers, m, 4)));
  // frozen: enter at 2, bootstrap to 4 after the first layer, coast down
  CHECK(plan.total_cost == doctest::Approx(76.88));
  CHECK(plan.bootstrap_count == 1);
  CHECK(plan.entries[0].input_level == 2);
  REQUIRE(plan.entries[0].bootstrap_to.has_value());
  CHECK(*plan.entries[0].bootstrap_to == 4);
  CHECK(plan.terminal_level == 0);
  execute_plan(layers, plan, 8, 4);

  std::mt19937 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    Instance inst = random_instance(rng, 9, 6, 3);
    PlacementPlan p = solve(prune_graph(build_graph(inst.unrolled, inst.cost, inst.L)));
    execute_plan(inst.unrolled, p, 8, inst.L);
  }
}

TEST_CASE("removing any bootstrap breaks or worsens a plan") {
  std::mt19937 rng(31);
  int boots_seen = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Instance inst = random_instance(rng, 10, 8, 4);
    PlacementPlan plan = solve(prune_graph(build_graph(inst.unrolled, inst.cost, inst.L)));
    for (std::size_t i = 0; i < plan.entries.size(); ++i) {
      if (!plan.entries[i].bootstrap_to) continue;
      ++boots_seen;
      PlacementPlan cut = plan;
      cut.entries[i].bootstrap_to.reset();
      bool underflow = false;
      double replay = 0;
      try {
        replay = plan_cost(inst.unrolled, inst.cost, cut, inst.L, /*strict=*/false);
      } catch (const LevelUnderflow&) {
        underflow = true;
      }
      CHECK((underflow || replay >= plan.total_cost));
    }
  }
  CHECK(boots_seen > 0);
}

TEST_CASE("periodic solver details") {
  SUBCASE("d2 = 1 reproduces solve exactly") {
    std::mt19937 rng(5150);
    for (int trial = 0; trial < 10; ++trial) {
      Instance inst = random_instance(rng, 9, 5, 1);
      PlacementPlan a = solve(prune_graph(build_graph(inst.block, inst.cost, inst.L)));
      PlacementPlan b = solve_periodic(inst.block, 1, inst.cost, inst.L);
      CHECK(a.total_cost == b.total_cost);
      CHECK(a.bootstrap_count == b.bootstrap_count);
      CHECK(a.terminal_level == b.terminal_level);
      REQUIRE(a.entries.size() == b.entries.size());
      for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].input_level == b.entries[i].input_level);
        CHECK(a.entries[i].bootstrap_to == b.entries[i].bootstrap_to);
        CHECK(a.entries[i].drop_to == b.entries[i].drop_to);
      }
    }
  }
  SUBCASE("fractional calibrated costs agree within tolerance") {
    OpCounts qkv, ffn, nl;
    qkv.ct_pt_mults = 48;
    qkv.rotations = 12;
    ffn.ct_pt_mults = 96;
    ffn.rotations = 20;
    nl.ct_ct_mults = 30;
    nl.additions = 40;
    CostModel m = CostModel::calibrated({qkv, ffn, nl}, 13);
    std::vector<LayerSpec> block = {layer("qkv", 2, 0), layer("ffn", 1, 1), layer("nl", 3, 2)};
    std::vector<LayerSpec> unrolled;
    for (int k = 0; k < 3; ++k)
      for (const auto& ly : block) unrolled.push_back(ly);
    PlacementPlan a = solve(prune_graph(build_graph(unrolled, m, 13)));
    PlacementPlan b = solve_periodic(block, 3, m, 13);
    CHECK(b.total_cost == doctest::Approx(a.total_cost).epsilon(1e-12));
    CHECK(plan_cost(unrolled, m, b, 13) == doctest::Approx(b.total_cost).epsilon(1e-12));
  }
}

TEST_CASE("relaxation count scales with the decomposed graph size") {
  SUBCASE("quadratic in the level budget") {
    std::vector<int> depths = {1, 0, 2, 1, 3, 1};
    std::vector<double> xs, ys;
    for (int L : {4, 5, 6, 7, 8, 9, 10, 12}) {
      CostModel m = CostModel::linear(std::vector<double>(6, 1.0), L);
      SolveStats stats;
      solve_periodic(chain(depths), 4, m, L, &stats);
      xs.push_back(static_cast<double>(L) * L * (6 + 4));
      ys.push_back(static_cast<double>(stats.relaxations));
    }
    auto [slope, r2] = fit_line(xs, ys);
    CHECK(slope > 0);
    CHECK(r2 > 0.98);
  }
  SUBCASE("linear in block size plus block count") {
    const int L = 8;
    std::vector<double> xs, ys;
    for (int k : {2, 4, 6, 8, 10, 12}) {
      std::vector<int> depths;
      for (int j = 0; j < k; ++j) depths.push_back(std::array<int, 4>{1, 0, 2, 1}[j % 4]);
      CostModel m = CostModel::linear(std::vector<double>(k, 1.0), L);
      SolveStats stats;
      solve_periodic(chain(depths), k, m, L, &stats);
      xs.push_back(static_cast<double>(L) * L * (k + k));
      ys.push_back(static_cast<double>(stats.relaxations));
    }
    auto [slope, r2] = fit_line(xs, ys);
    CHECK(slope > 0);
    CHECK(r2 > 0.98);
  }
}

TEST_CASE("pruned edge count grows linearly with the level budget") {
  std::vector<LayerSpec> layers;
  for (int i = 0; i < 24; ++i) {
    const int depth = std::array<int, 4>{1, 0, 2, 1}[i % 4];
    layers.push_back(layer("l" + std::to_string(i), depth, i % 3));
  }
  std::vector<double> xs, ys, full;
  for (int L : {4, 6, 8, 10, 12, 14}) {
    CostModel m = CostModel::linear({1.0, 2.0, 3.0}, L);
    LevelGraph g = build_graph(layers, m, L);
    xs.push_back(L);
    ys.push_back(static_cast<double>(prune_graph(g).edge_count()));
    full.push_back(static_cast<double>(g.edge_count()));
  }
  auto [slope, r2] = fit_line(xs, ys);
  CHECK(slope > 0);
  CHECK(r2 > 0.99);
  // and pruning actually bites: the unpruned graph grows superlinearly
  CHECK(full.back() / full.front() > ys.back() / ys.front() * 1.5);
}

TEST_CASE("sublayer expansion") {
  SUBCASE("single-phase layers pass through unchanged") {
    ApproxSpec spec = desk_spec("desk-default", "silu");
    LayerSpec act = layer("act", silu_depth(spec), 0);
    act.trace = sublayer_trace("silu", spec);
    auto out = expand_sublayers({act});
    REQUIRE(out.size() == 1);
    CHECK(out[0].name == "act");
    CHECK(out[0].sublayer.empty());
    CHECK(out[0].depth == act.depth);
  }
  SUBCASE("softmax splits at its interruptible boundaries") {
    ApproxSpec spec = desk_spec("desk-shallow", "softmax");
    REQUIRE(softmax_depth(spec) == 12);
    LayerSpec sm = layer("softmax", 12, 0);
    sm.trace = sublayer_trace("softmax", spec);
    CostModel m = CostModel::linear({12.0}, 13);
    auto out = expand_sublayers({sm}, &m);
    REQUIRE(out.size() == 3);  // two extra bootstrap-candidate boundaries
    CHECK(out[0].sublayer == "exponential");
    CHECK(out[1].sublayer == "normalizer");
    CHECK(out[2].sublayer == "renormalize");
    CHECK(out[0].depth == 4);
    CHECK(out[1].depth == 8 - 1);  // normalizer + reciprocal grouped
    CHECK(out[2].depth == 1);
    CHECK(out[0].depth + out[1].depth + out[2].depth == 12);
    CHECK(out[0].ct_count == 1);
    CHECK(out[1].ct_count == 2);
    CHECK(out[2].ct_count == 2);
    for (const auto& ly : out) {
      CHECK(ly.name == "softmax");
      CHECK(ly.trace.phases.empty());
    }
    // depth-proportional pricing
    CHECK(m.layer_time(out[0].cost_id, 0) == doctest::Approx(4.0));
    CHECK(m.layer_time(out[1].cost_id, 0) == doctest::Approx(7.0));
    CHECK(m.layer_time(out[2].cost_id, 0) == doctest::Approx(1.0));
  }
  SUBCASE("trace depth must match the layer depth") {
    ApproxSpec spec = desk_spec("desk-shallow", "softmax");
    LayerSpec sm = layer("softmax", 11, 0);  // wrong: trace says 12
    sm.trace = sublayer_trace("softmax", spec);
    CHECK_THROWS_AS(expand_sublayers({sm}), ShapeMismatch);
  }
}

TEST_CASE("expansion lowers or preserves the plan cost") {
  ApproxSpec spec = desk_spec("desk-shallow", "softmax");
  auto make_chain = [&](void) {
    std::vector<LayerSpec> layers = {layer("pre", 2, 0), layer("softmax", 12, 1),
                                     layer("post", 2, 2)};
    layers[1].trace = sublayer_trace("softmax", spec);
    return layers;
  };

  SUBCASE("steep bootstrap table forces an in-module bootstrap") {
    std::vector<double> boot = {0, 10, 11, 12, 13, 14, 15, 16, 17, 500, 501, 502, 503, 504};
    CostModel m0 = CostModel::linear({1.0, 1.0, 1.0}, boot);
    auto layers = make_chain();
    PlacementPlan boundary = solve(prune_graph(build_graph(layers, m0, 13)));

    CostModel m1 = m0;
    auto expanded = expand_sublayers(layers, &m1);
    PlacementPlan fine = solve(prune_graph(build_graph(expanded, m1, 13)));

    CHECK(fine.total_cost < boundary.total_cost);  // strict gain
    bool in_module = false;
    for (std::size_t i = 0; i + 1 < fine.entries.size(); ++i)
      if (fine.entries[i].bootstrap_to && fine.entries[i + 1].layer == fine.entries[i].layer)
        in_module = true;
    CHECK(in_module);
    CHECK(plan_cost(expanded, m1, fine, 13) == doctest::Approx(fine.total_cost));
  }

  SUBCASE("never worse across seeded cost tables") {
    std::mt19937 rng(1234);
    std::uniform_int_distribution<int> base(1, 60), step(1, 80);
    int strict = 0;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> boot(14, 0.0);
      boot[1] = base(rng);
      for (int y = 2; y <= 13; ++y) boot[y] = boot[y - 1] + step(rng);
      CostModel m0 = CostModel::linear(
          {double(base(rng)), double(base(rng)), double(base(rng))}, boot);
      auto layers = make_chain();
      PlacementPlan boundary = solve(prune_graph(build_graph(layers, m0, 13)));
      CostModel m1 = m0;
      auto expanded = expand_sublayers(layers, &m1);
      PlacementPlan fine = solve(prune_graph(build_graph(expanded, m1, 13)));
      CHECK(fine.total_cost <= boundary.total_cost + 1e-9);
      if (fine.total_cost < boundary.total_cost - 1e-9) ++strict;
    }
    CHECK(strict >= 1);
  }
}

TEST_CASE("plan json round trip") {
  CostModel m = CostModel::linear({1.0}, std::vector<double>{0.0, 10.0, 20.0});
  std::vector<LayerSpec> layers = {layer("a", 1, 0), layer("b", 1, 0), layer("c", 1, 0)};
  PlacementPlan plan = solve(prune_graph(build_graph(layers, m, 2)));
  const std::string text = plan.to_json();
  CHECK(text.find("\"layer\"") != std::string::npos);
  CHECK(text.find("\"bootstrap_to\"") != std::string::npos);

  PlacementPlan back = PlacementPlan::from_json(text);
  REQUIRE(back.entries.size() == plan.entries.size());
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    CHECK(back.entries[i].layer == plan.entries[i].layer);
    CHECK(back.entries[i].sublayer == plan.entries[i].sublayer);
    CHECK(back.entries[i].index == plan.entries[i].index);
    CHECK(back.entries[i].input_level == plan.entries[i].input_level);
    CHECK(back.entries[i].bootstrap_to == plan.entries[i].bootstrap_to);
    CHECK(back.entries[i].drop_to == plan.entries[i].drop_to);
  }
  CHECK(back.bootstrap_count == plan.bootstrap_count);
  // re-pricing the parsed rows reproduces the solver's total
  CHECK(plan_cost(layers, m, back, 2) == doctest::Approx(plan.total_cost));
}

TEST_CASE("degenerate inputs") {
  CostModel m = CostModel::linear({1.0}, 4);
  CHECK_THROWS_AS(build_graph({}, m, 4), ShapeMismatch);
  CHECK_THROWS_AS(build_graph({layer("a", -1, 0)}, m, 4), ShapeMismatch);
  CHECK_THROWS_AS(build_graph({layer("a", 1, 7)}, m, 4), ShapeMismatch);  // bad cost id
  CHECK_THROWS_AS(build_graph({layer("a", 5, 0)}, m, 4), InfeasibleLayer);
  CHECK_THROWS_AS(solve_periodic({}, 2, m, 4), ShapeMismatch);
  CHECK_THROWS_AS(solve_periodic({layer("a", 1, 0)}, 0, m, 4), ShapeMismatch);

  // a gutted graph has no route to the terminal
  LevelGraph g = build_graph({layer("a", 1, 0), layer("b", 1, 0)}, m, 4);
  LevelGraph cut = g;
  cut.edges.erase(std::remove_if(cut.edges.begin(), cut.edges.end(),
                                 [](const LevelEdge& e) { return e.layer == 0; }),
                  cut.edges.end());
  CHECK_THROWS_AS(solve(cut), NoFeasiblePath);
}
