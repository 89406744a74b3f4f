#include "slotforge/placement.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

#include "json.hpp"

namespace slotforge {

namespace {

// Measured per-operation latencies (microseconds) at five operating levels,
// and bootstrap latencies (milliseconds) at five target levels.
constexpr std::array<int, 5> kCalLevels = {1, 4, 7, 10, 13};
constexpr std::array<double, 5> kAddUs = {9.51, 11.86, 13.10, 27.87, 35.27};
constexpr std::array<double, 5> kCtPtUs = {66.07, 87.76, 158.22, 140.82, 178.73};
constexpr std::array<double, 5> kCtCtUs = {223.23, 319.28, 459.76, 584.87, 816.87};
constexpr std::array<double, 5> kRotUs = {164.35, 234.91, 301.46, 481.62, 608.48};
constexpr std::array<double, 5> kBootMs = {51.30, 66.88, 85.39, 104.92, 125.58};

// Least-squares slope through the origin of cost against (level + 1), in ms.
double unit_ms(const std::array<double, 5>& us) {
  double num = 0, den = 0;
  for (std::size_t k = 0; k < us.size(); ++k) {
    const double limbs = kCalLevels[k] + 1;
    num += us[k] * limbs;
    den += limbs * limbs;
  }
  return num / den / 1000.0;
}

}  // namespace

OpUnitCosts calibration_units() {
  OpUnitCosts u;
  u.add = unit_ms(kAddUs);
  u.ctpt_mult = unit_ms(kCtPtUs);
  u.ctct_mult = unit_ms(kCtCtUs);
  u.rotation = unit_ms(kRotUs);
  return u;
}

double calibrated_boot_ms(int target) {
  if (target < 1) throw InvalidTarget("calibrated_boot_ms: target must be >= 1");
  const double y = target;
  if (y <= kCalLevels.front()) return kBootMs.front();
  for (std::size_t k = 1; k < kCalLevels.size(); ++k) {
    if (y <= kCalLevels[k]) {
      const double t = (y - kCalLevels[k - 1]) / (kCalLevels[k] - kCalLevels[k - 1]);
      return kBootMs[k - 1] + t * (kBootMs[k] - kBootMs[k - 1]);
    }
  }
  const std::size_t last = kCalLevels.size() - 1;
  const double slope =
      (kBootMs[last] - kBootMs[last - 1]) / (kCalLevels[last] - kCalLevels[last - 1]);
  return kBootMs[last] + slope * (y - kCalLevels[last]);
}

CostModel::CostModel(std::vector<std::vector<double>> layer_ms, std::vector<double> boot_ms)
    : layer_(std::move(layer_ms)), boot_(std::move(boot_ms)) {
  if (layer_.empty() || boot_.size() < 2)
    throw ShapeMismatch("CostModel: need at least one layer row and one bootstrap target");
  const std::size_t width = boot_.size();
  for (const auto& row : layer_) {
    if (row.size() != width)
      throw ShapeMismatch("CostModel: layer rows must cover levels 0.." +
                          std::to_string(width - 1));
    for (std::size_t x = 0; x < row.size(); ++x) {
      if (!std::isfinite(row[x]) || row[x] < 0)
        throw ShapeMismatch("CostModel: layer times must be finite and non-negative");
      if (x > 0 && row[x] < row[x - 1])
        throw ShapeMismatch("CostModel: layer time must be non-decreasing in the level");
    }
  }
  for (std::size_t y = 1; y < boot_.size(); ++y) {
    if (!std::isfinite(boot_[y]) || boot_[y] < 0)
      throw ShapeMismatch("CostModel: bootstrap times must be finite and non-negative");
    if (y > 1 && boot_[y] < boot_[y - 1])
      throw ShapeMismatch("CostModel: bootstrap time must be non-decreasing in the target");
  }
}

CostModel CostModel::linear(std::vector<double> base_ms, int L) {
  std::vector<double> boot(L + 1, 0.0);
  for (int y = 1; y <= L; ++y) boot[y] = calibrated_boot_ms(y);
  return linear(std::move(base_ms), std::move(boot));
}

CostModel CostModel::linear(std::vector<double> base_ms, std::vector<double> boot_ms) {
  const int L = static_cast<int>(boot_ms.size()) - 1;
  std::vector<std::vector<double>> rows;
  rows.reserve(base_ms.size());
  for (double base : base_ms) {
    std::vector<double> row(L + 1);
    for (int x = 0; x <= L; ++x) row[x] = base * (x + 1);
    rows.push_back(std::move(row));
  }
  return CostModel(std::move(rows), std::move(boot_ms));
}

CostModel CostModel::calibrated(const std::vector<OpCounts>& counts, int L) {
  const OpUnitCosts u = calibration_units();
  std::vector<double> bases;
  bases.reserve(counts.size());
  for (const auto& c : counts)
    bases.push_back(c.additions * u.add + c.ct_pt_mults * u.ctpt_mult +
                    c.ct_ct_mults * u.ctct_mult + c.rotations * u.rotation);
  return linear(std::move(bases), L);
}

double CostModel::layer_time(int cost_id, int input_level) const {
  return layer_.at(cost_id).at(input_level);
}

double CostModel::boot_time(int target_level) const {
  if (target_level < 1) throw InvalidTarget("CostModel: bootstrap target must be >= 1");
  return boot_.at(target_level);
}

int CostModel::add_scaled(int cost_id, double fraction) {
  if (fraction <= 0 || !std::isfinite(fraction))
    throw ShapeMismatch("CostModel: scale fraction must be positive");
  std::vector<double> row = layer_.at(cost_id);
  for (double& v : row) v *= fraction;
  layer_.push_back(std::move(row));
  return static_cast<int>(layer_.size()) - 1;
}

namespace {

void validate_layers(const std::vector<LayerSpec>& layers, const CostModel& cost, int L) {
  if (layers.empty()) throw ShapeMismatch("placement: empty layer sequence");
  if (L < 1) throw InvalidTarget("placement: level budget must be >= 1");
  if (cost.max_level() < L)
    throw ShapeMismatch("placement: cost model covers levels up to " +
                        std::to_string(cost.max_level()) + ", budget is " + std::to_string(L));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& ly = layers[i];
    if (ly.depth < 0) throw ShapeMismatch("layer " + ly.name + ": negative depth");
    if (ly.depth > L)
      throw InfeasibleLayer("layer " + ly.name + " consumes " + std::to_string(ly.depth) +
                            " levels, budget is " + std::to_string(L));
    if (ly.cost_id < 0 || ly.cost_id >= cost.n_ids())
      throw ShapeMismatch("layer " + ly.name + ": cost id " + std::to_string(ly.cost_id) +
                          " out of range");
    if (ly.ct_count < 1) throw ShapeMismatch("layer " + ly.name + ": ct_count must be >= 1");
    if (ly.shortcut_from > static_cast<int>(i))
      throw ShapeMismatch("layer " + ly.name + ": shortcut must come from an earlier layer");
    if (!ly.trace.phases.empty() && ly.trace.total_depth() != ly.depth)
      throw ShapeMismatch("layer " + ly.name + ": trace depth " +
                          std::to_string(ly.trace.total_depth()) + " != layer depth " +
                          std::to_string(ly.depth));
  }
}

// Appends every edge leaving layer i. `next` is the following layer, or
// nullptr when layer i is last (terminal edges carry no bootstrap variants).
void append_edges(std::vector<LevelEdge>& edges, const std::vector<LayerSpec>& layers, int i,
                  const CostModel& cost, int L, bool pruned) {
  const auto& ly = layers[i];
  const LayerSpec* next = i + 1 < static_cast<int>(layers.size()) ? &layers[i + 1] : nullptr;
  for (int x = ly.depth; x <= L; ++x) {
    const int post = x - ly.depth;
    const double tl = cost.layer_time(ly.cost_id, x);
    if (!next) {
      edges.push_back({i, x, post, tl, false});
      continue;
    }
    for (int y = next->depth; y <= L; ++y) {
      const bool boot = y > post;
      if (pruned && !(boot ? post == 0 : y == post)) continue;
      const double w = tl + (boot ? next->ct_count * cost.boot_time(y) : 0.0);
      edges.push_back({i, x, y, w, boot});
    }
  }
}

}  // namespace

LevelGraph build_graph(const std::vector<LayerSpec>& layers, const CostModel& cost, int L) {
  validate_layers(layers, cost, L);
  LevelGraph g;
  g.L = L;
  g.layers = layers;
  for (int x = layers[0].depth; x <= L; ++x) g.edges.push_back({-1, L, x, 0.0, false});
  for (int i = 0; i < static_cast<int>(layers.size()); ++i)
    append_edges(g.edges, layers, i, cost, L, /*pruned=*/false);
  return g;
}

LevelGraph prune_graph(const LevelGraph& g) {
  LevelGraph out;
  out.L = g.L;
  out.pruned = true;
  out.layers = g.layers;
  const int D = static_cast<int>(g.layers.size());
  for (const auto& e : g.edges) {
    if (e.layer >= 0 && e.layer < D - 1) {
      const int post = e.from - g.layers[e.layer].depth;
      if (!(e.bootstrap ? post == 0 : e.to == post)) continue;
    }
    out.edges.push_back(e);
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Prefix state of the tie-broken DP: cost, then bootstrap count, then the
// bootstrap positions compared lexicographically (earlier layers preferred).
struct PathState {
  double cost = kInf;
  int nboots = 0;
  std::vector<int> boots;
  int parent = -1;
  bool reached = false;
};

bool improves(double cost, int nboots, const std::vector<int>& boots, const PathState& cur) {
  if (!cur.reached) return true;
  if (cost != cur.cost) return cost < cur.cost;
  if (nboots != cur.nboots) return nboots < cur.nboots;
  return boots < cur.boots;
}

using StateTable = std::vector<std::vector<PathState>>;  // [layer][input level]

// Relaxes `edges` over a table with `rows` vertex rows (layer row r holds
// input levels; the final row holds terminal/exit levels). Source rows must
// be seeded by the caller.
void relax_all(StateTable& states, const std::vector<LevelEdge>& edges, long long* relaxations) {
  std::vector<int> scratch;
  for (const auto& e : edges) {
    if (relaxations) ++*relaxations;
    const PathState* from;
    static const PathState kSource{0.0, 0, {}, -1, true};
    if (e.layer < 0) {
      from = &kSource;
    } else {
      from = &states[e.layer][e.from];
      if (!from->reached) continue;
    }
    const double cost = from->cost + e.weight;
    const int nboots = from->nboots + (e.bootstrap ? 1 : 0);
    scratch = from->boots;
    if (e.bootstrap) scratch.push_back(e.layer + 1);
    PathState& tgt = states[e.layer + 1][e.to];
    if (improves(cost, nboots, scratch, tgt)) {
      tgt.cost = cost;
      tgt.nboots = nboots;
      tgt.boots = scratch;
      tgt.parent = e.layer < 0 ? -1 : e.from;
      tgt.reached = true;
    }
  }
}

PlanEntry make_entry(const LayerSpec& ly, int index, int input, int next) {
  PlanEntry e;
  e.layer = ly.name;
  e.sublayer = ly.sublayer;
  e.index = index;
  e.input_level = input;
  const int post = input - ly.depth;
  if (next > post)
    e.bootstrap_to = next;
  else if (next < post)
    e.drop_to = next;
  return e;
}

}  // namespace

PlacementPlan solve(const LevelGraph& g, SolveStats* stats) {
  const int D = static_cast<int>(g.layers.size());
  if (D == 0) throw ShapeMismatch("solve: empty graph");
  StateTable states(D + 1, std::vector<PathState>(g.L + 1));

  std::vector<LevelEdge> edges = g.edges;
  std::stable_sort(edges.begin(), edges.end(),
                   [](const LevelEdge& a, const LevelEdge& b) { return a.layer < b.layer; });
  relax_all(states, edges, stats ? &stats->relaxations : nullptr);

  // Tie order at the sink: cost, bootstrap count, then the higher terminal
  // level (distinct levels, so bootstrap positions never get a say here).
  int term = -1;
  for (int x = g.L; x >= 0; --x) {
    const PathState& s = states[D][x];
    if (!s.reached) continue;
    if (term < 0) {
      term = x;
      continue;
    }
    const PathState& b = states[D][term];
    if (s.cost < b.cost || (s.cost == b.cost && s.nboots < b.nboots)) term = x;
  }
  if (term < 0) throw NoFeasiblePath("solve: no terminal vertex is reachable");

  std::vector<int> levels(D + 1);
  levels[D] = term;
  for (int i = D; i >= 1; --i) levels[i - 1] = states[i][levels[i]].parent;

  PlacementPlan plan;
  plan.total_cost = states[D][term].cost;
  plan.bootstrap_count = states[D][term].nboots;
  plan.terminal_level = term;
  for (int i = 0; i < D; ++i)
    plan.entries.push_back(make_entry(g.layers[i], i, levels[i], levels[i + 1]));
  return plan;
}

PlacementPlan solve_periodic(const std::vector<LayerSpec>& block, int d2, const CostModel& cost,
                             int L, SolveStats* stats) {
  if (block.empty()) throw ShapeMismatch("solve_periodic: empty block");
  if (d2 < 1) throw ShapeMismatch("solve_periodic: need at least one block");
  validate_layers(block, cost, L);
  long long* relax = stats ? &stats->relaxations : nullptr;
  const int d1 = static_cast<int>(block.size());

  // Block-internal pruned edges, plus the full boundary family from the last
  // block layer into the next block's first layer.
  std::vector<LayerSpec> extended = block;
  extended.push_back(block[0]);
  std::vector<LevelEdge> edges;
  for (int i = 0; i < d1; ++i) append_edges(edges, extended, i, cost, L, /*pruned=*/true);

  // Stage 1: for each entry level, the tie-broken best path to every exit
  // level (row d1) and to the terminal (no trailing bootstrap).
  const int entry_min = block[0].depth;
  struct EntryRun {
    StateTable states;
    // terminal candidates per output level, derived from row d1-1; the
    // parent field records the last layer's input level
    std::vector<PathState> term;
  };
  std::vector<EntryRun> runs(L + 1);
  const auto& last = block[d1 - 1];
  for (int a = entry_min; a <= L; ++a) {
    EntryRun& run = runs[a];
    run.states.assign(d1 + 1, std::vector<PathState>(L + 1));
    run.states[0][a] = PathState{0.0, 0, {}, -1, true};
    relax_all(run.states, edges, relax);
    run.term.assign(L + 1, PathState{});
    for (int x = last.depth; x <= L; ++x) {
      if (relax) ++*relax;
      const PathState& s = run.states[d1 - 1][x];
      if (!s.reached) continue;
      const double c = s.cost + cost.layer_time(last.cost_id, x);
      const int t = x - last.depth;  // one candidate per terminal level
      if (improves(c, s.nboots, s.boots, run.term[t])) run.term[t] = PathState{c, s.nboots, s.boots, x, true};
    }
  }

  // Stage 2: compose block copies over entry levels, offsetting bootstrap
  // positions into global layer indices.
  struct Hop {
    PathState state;
    int parent_entry = -1;
  };
  std::vector<Hop> front(L + 1);
  for (int a = entry_min; a <= L; ++a) front[a] = {PathState{0.0, 0, {}, -1, true}, -1};
  std::vector<std::vector<Hop>> history;  // per composed boundary, for reconstruction
  for (int k = 1; k < d2; ++k) {
    std::vector<Hop> nxt(L + 1);
    for (int a = entry_min; a <= L; ++a) {
      if (!front[a].state.reached) continue;
      for (int b = entry_min; b <= L; ++b) {
        if (relax) ++*relax;
        const PathState& hop = runs[a].states[d1][b];
        if (!hop.reached) continue;
        const double c = front[a].state.cost + hop.cost;
        const int nb = front[a].state.nboots + hop.nboots;
        std::vector<int> boots = front[a].state.boots;
        for (int pos : hop.boots) boots.push_back(pos + (k - 1) * d1);
        if (improves(c, nb, boots, nxt[b].state)) {
          nxt[b].state = PathState{c, nb, std::move(boots), -1, true};
          nxt[b].parent_entry = a;
        }
      }
    }
    history.push_back(front);
    front = std::move(nxt);
  }

  // Final block: attach the terminal tails, preferring higher terminal levels.
  double best_cost = kInf;
  int best_nb = 0, best_entry = -1, best_term = -1;
  std::vector<int> best_boots;
  for (int a = entry_min; a <= L; ++a) {
    if (!front[a].state.reached) continue;
    for (int t = L; t >= 0; --t) {
      if (relax) ++*relax;
      const PathState& tail = runs[a].term[t];
      if (!tail.reached) continue;
      const double c = front[a].state.cost + tail.cost;
      const int nb = front[a].state.nboots + tail.nboots;
      std::vector<int> boots = front[a].state.boots;
      for (int pos : tail.boots) boots.push_back(pos + (d2 - 1) * d1);
      const bool better = best_entry < 0 || c < best_cost ||
                          (c == best_cost && (nb < best_nb ||
                                              (nb == best_nb && (t > best_term ||
                                                                 (t == best_term &&
                                                                  boots < best_boots)))));
      if (better) {
        best_cost = c;
        best_nb = nb;
        best_boots = std::move(boots);
        best_entry = a;
        best_term = t;
      }
    }
  }
  if (best_entry < 0) throw NoFeasiblePath("solve_periodic: no terminal vertex is reachable");

  // Recover the entry level of every block (A_k lives in history[k] for
  // k < d2-1 and in `front` for the last boundary), then each block's
  // internal path from its stage-1 parents.
  std::vector<int> entries(d2);
  entries[d2 - 1] = best_entry;
  for (int k = d2 - 1; k >= 1; --k) {
    const std::vector<Hop>& row = k == d2 - 1 ? front : history[k];
    entries[k - 1] = row[entries[k]].parent_entry;
  }

  PlacementPlan plan;
  plan.total_cost = best_cost;
  plan.bootstrap_count = best_nb;
  plan.terminal_level = best_term;
  for (int k = 0; k < d2; ++k) {
    const EntryRun& run = runs[entries[k]];
    std::vector<int> levels(d1 + 1);
    if (k == d2 - 1) {
      levels[d1] = best_term;
      levels[d1 - 1] = run.term[best_term].parent;
    } else {
      levels[d1] = entries[k + 1];
      levels[d1 - 1] = run.states[d1][levels[d1]].parent;
    }
    for (int i = d1 - 1; i >= 1; --i) levels[i - 1] = run.states[i][levels[i]].parent;
    for (int i = 0; i < d1; ++i)
      plan.entries.push_back(make_entry(block[i], k * d1 + i, levels[i], levels[i + 1]));
  }
  return plan;
}

std::vector<LayerSpec> expand_sublayers(const std::vector<LayerSpec>& layers, CostModel* cost) {
  std::vector<LayerSpec> out;
  std::vector<int> start_of(layers.size());  // old index -> first expanded index
  for (std::size_t i = 0; i < layers.size(); ++i) {
    start_of[i] = static_cast<int>(out.size());
    const auto& ly = layers[i];
    const auto& phases = ly.trace.phases;
    if (!phases.empty() && ly.trace.total_depth() != ly.depth)
      throw ShapeMismatch("layer " + ly.name + ": trace depth " +
                          std::to_string(ly.trace.total_depth()) + " != layer depth " +
                          std::to_string(ly.depth));
    std::vector<std::size_t> heads;  // segment head phase indices
    heads.push_back(0);
    for (std::size_t k = 1; k < phases.size(); ++k)
      if (phases[k].interruptible) heads.push_back(k);
    if (phases.size() <= 1 || heads.size() <= 1) {
      out.push_back(ly);
      continue;
    }
    heads.push_back(phases.size());
    for (std::size_t s = 0; s + 1 < heads.size(); ++s) {
      LayerSpec sub;
      sub.name = ly.name;
      sub.sublayer = phases[heads[s]].name;
      for (std::size_t k = heads[s]; k < heads[s + 1]; ++k) sub.depth += phases[k].depth;
      sub.ct_count = s == 0 ? ly.ct_count : phases[heads[s]].ct_count + (ly.ct_count - 1);
      sub.cost_id = cost ? cost->add_scaled(ly.cost_id,
                                            static_cast<double>(sub.depth) / ly.depth)
                         : ly.cost_id;
      sub.shortcut_from = s + 2 == heads.size() ? ly.shortcut_from : -1;
      out.push_back(sub);
    }
  }
  for (auto& ly : out)
    if (ly.shortcut_from >= 0) ly.shortcut_from = start_of.at(ly.shortcut_from);
  return out;
}

double plan_cost(const std::vector<LayerSpec>& layers, const CostModel& cost,
                 const PlacementPlan& plan, int L, bool strict) {
  if (plan.entries.size() != layers.size())
    throw ShapeMismatch("plan_cost: plan has " + std::to_string(plan.entries.size()) +
                        " entries for " + std::to_string(layers.size()) + " layers");
  if (plan.entries.empty()) return 0.0;
  if (plan.entries[0].input_level > L)
    throw InvalidTarget("plan_cost: first input level exceeds the budget");
  double total = 0;
  int level = plan.entries[0].input_level;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& ly = layers[i];
    const auto& e = plan.entries[i];
    if (strict && e.input_level != level)
      throw InvalidTarget("plan_cost: layer " + ly.name + " expects input level " +
                          std::to_string(e.input_level) + ", replay is at " +
                          std::to_string(level));
    if (level < ly.depth)
      throw LevelUnderflow("plan_cost: layer " + ly.name + " needs " + std::to_string(ly.depth) +
                           " levels, has " + std::to_string(level));
    total += cost.layer_time(ly.cost_id, level);
    level -= ly.depth;
    if (e.bootstrap_to) {
      const int y = *e.bootstrap_to;
      if (y < 1 || y > L) throw InvalidTarget("plan_cost: bootstrap target out of range");
      const int restore = i + 1 < layers.size() ? layers[i + 1].ct_count : 1;
      total += restore * cost.boot_time(y);
      level = y;
    } else if (e.drop_to) {
      const int y = *e.drop_to;
      if (y > level) {
        if (strict) throw InvalidTarget("plan_cost: level drop cannot raise the level");
      } else {
        level = y;
      }
    }
  }
  return total;
}

}  // namespace slotforge

// --- serialization -----------------------------------------------------------

namespace slotforge {

std::string PlacementPlan::to_json(int indent) const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json row;
    row["layer"] = e.layer;
    row["sublayer"] = e.sublayer.empty() ? nlohmann::json() : nlohmann::json(e.sublayer);
    row["input_level"] = e.input_level;
    row["bootstrap_to"] = e.bootstrap_to ? nlohmann::json(*e.bootstrap_to) : nlohmann::json();
    row["drop_to"] = e.drop_to ? nlohmann::json(*e.drop_to) : nlohmann::json();
    rows.push_back(std::move(row));
  }
  return rows.dump(indent);
}

PlacementPlan PlacementPlan::from_json(const std::string& text) {
  nlohmann::json rows = nlohmann::json::parse(text);
  if (!rows.is_array()) throw ShapeMismatch("placement plan: expected a JSON array");
  PlacementPlan plan;
  int index = 0;
  for (const auto& row : rows) {
    PlanEntry e;
    e.layer = row.at("layer").get<std::string>();
    if (row.contains("sublayer") && !row["sublayer"].is_null())
      e.sublayer = row["sublayer"].get<std::string>();
    e.index = index++;
    e.input_level = row.at("input_level").get<int>();
    if (row.contains("bootstrap_to") && !row["bootstrap_to"].is_null())
      e.bootstrap_to = row["bootstrap_to"].get<int>();
    if (row.contains("drop_to") && !row["drop_to"].is_null()) e.drop_to = row["drop_to"].get<int>();
    if (e.bootstrap_to) ++plan.bootstrap_count;
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

}  // namespace slotforge
