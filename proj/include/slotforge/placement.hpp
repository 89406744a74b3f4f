#pragma once
// Bootstrap placement for leveled pipelines.
//
// A model is a chain of layers, each consuming a fixed number of
// multiplicative levels. Somewhere along the chain the ciphertext runs out of
// levels and must be bootstrapped; where to bootstrap, and to which target
// level, trades bootstrap latency against running layers at higher levels
// (every primitive slows down as the level grows). The search space is a DAG
// over (layer, input level) vertices; its shortest path is the cheapest
// placement.
//
// Conventions:
//   - A layer of depth l accepts input levels x in [l, L]. It computes first,
//     landing at x - l, and only then may bootstrap (to any target in [1, L])
//     or drop levels (free).
//   - Edge weight = layer time at its input level, plus the bootstrap time,
//     scaled by the count of live ciphertexts to restore, whenever the
//     transition raises the level.
//   - A plan lists, per layer: the input level, then the post-compute action.
//     The first entry's input level below L implies an initial free drop.
//   - Residual shortcuts add no graph edges: a bootstrap restores every live
//     ciphertext (the saved branch included, priced via ct_count), so the
//     rejoin level always equals the main-chain level.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/nonlinear.hpp"

namespace slotforge {

// One leveled computation unit.
struct LayerSpec {
  std::string name;
  std::string sublayer;    // set by expand_sublayers; empty for whole layers
  int depth = 0;           // multiplicative levels consumed
  SubLayerTrace trace;     // optional phase structure (nonlinear layers)
  int cost_id = 0;         // row in the CostModel
  int ct_count = 1;        // live ciphertexts a bootstrap entering here restores
  int shortcut_from = -1;  // earlier layer whose input re-joins after this one
};

// Per-operation unit costs in ms per (level + 1), least-squares fitted
// through the origin to the measured latency table.
struct OpUnitCosts {
  double add = 0;
  double ctpt_mult = 0;
  double ctct_mult = 0;
  double rotation = 0;
};
OpUnitCosts calibration_units();

// Bootstrap latency in ms for a target level: linear interpolation of the
// measured table, extrapolated beyond its last point. target >= 1.
double calibrated_boot_ms(int target);

// Latency model. Layer time is monotone non-decreasing in the input level;
// bootstrap time is monotone non-decreasing in the target level. Both are
// checked at construction.
class CostModel {
 public:
  // Explicit tables: layer_ms[id][x] for input level x in [0, L]
  // (all rows sized L + 1), boot_ms[y] for target y in [1, L]
  // (size L + 1; boot_ms[0] is ignored).
  CostModel(std::vector<std::vector<double>> layer_ms, std::vector<double> boot_ms);

  // Linear model: layer time = base_ms[id] * (x + 1) — per-primitive cost
  // scales with the limb count — with the calibrated bootstrap table.
  static CostModel linear(std::vector<double> base_ms, int L);
  static CostModel linear(std::vector<double> base_ms, std::vector<double> boot_ms);

  // Linear model with base_ms derived from per-layer ledger counts priced at
  // the fitted unit costs (hoisted rotations are priced as plain rotations).
  static CostModel calibrated(const std::vector<OpCounts>& counts, int L);

  double layer_time(int cost_id, int input_level) const;
  double boot_time(int target_level) const;
  int max_level() const { return static_cast<int>(boot_.size()) - 1; }
  int n_ids() const { return static_cast<int>(layer_.size()); }

  // Appends a new cost id priced as `fraction` of an existing row; returns it.
  int add_scaled(int cost_id, double fraction);

 private:
  std::vector<std::vector<double>> layer_;  // [id][input level]
  std::vector<double> boot_;                // [target level]
};

// e[i, x, y]: layer i computes from input level x; its successor is entered
// at level y (for the last layer, y is the terminal output level).
// layer == -1 marks the free source edges (fresh ciphertext at L dropping to
// the first layer's input level).
struct LevelEdge {
  int layer = 0;
  int from = 0;
  int to = 0;
  double weight = 0;
  bool bootstrap = false;
};

struct LevelGraph {
  int L = 0;
  bool pruned = false;
  std::vector<LayerSpec> layers;
  std::vector<LevelEdge> edges;  // source edges first, then by layer ascending
  std::size_t edge_count() const { return edges.size(); }
  int min_input(int layer) const { return layers.at(layer).depth; }
};

// Builds the full graph: for every boundary, exact transitions, free drops,
// and bootstraps to any higher target. Throws InfeasibleLayer when a layer's
// depth exceeds the budget.
LevelGraph build_graph(const std::vector<LayerSpec>& layers, const CostModel& cost, int L);

// Dominance pruning: interior boundaries keep only exact-depth transitions
// and bootstraps taken at post-compute level zero; the source keeps its free
// drops. Edge count falls from O(L^2 D) to O(L D); optima are preserved
// (level drops pay off only at the source, and a bootstrap taken early is
// never cheaper than computing down to zero first).
LevelGraph prune_graph(const LevelGraph& g);

struct PlanEntry {
  std::string layer;
  std::string sublayer;  // empty for whole layers
  int index = 0;         // position in the layer sequence
  int input_level = 0;
  std::optional<int> bootstrap_to;  // post-compute bootstrap target
  std::optional<int> drop_to;       // post-compute free drop target
};

struct PlacementPlan {
  std::vector<PlanEntry> entries;
  double total_cost = 0;
  int terminal_level = 0;
  int bootstrap_count = 0;
  // Serialized as a JSON array of
  //   {layer, sublayer, input_level, bootstrap_to, drop_to}
  // with null for absent actions and for empty sublayers.
  std::string to_json(int indent = 2) const;
  static PlacementPlan from_json(const std::string& text);
};

struct SolveStats {
  long long relaxations = 0;  // edge relaxation attempts
};

// Shortest path by topological relaxation. Ties break toward fewer
// bootstraps, then a higher terminal level, then earlier bootstrap layer
// indices. Throws NoFeasiblePath when no terminal vertex is reachable.
PlacementPlan solve(const LevelGraph& g, SolveStats* stats = nullptr);

// Two-stage solver for a model of d2 identical blocks: per-block minimum
// cost entry->exit matrices, then a DP over block boundaries. Equals solve()
// on the unrolled model at O(L^2 (d1 + d2)) relaxations instead of
// O(L^2 d1 d2).
PlacementPlan solve_periodic(const std::vector<LayerSpec>& block, int d2, const CostModel& cost,
                             int L, SolveStats* stats = nullptr);

// Replaces each layer that carries a multi-phase trace by its run of
// sub-layers, one per stretch between interruptible phase boundaries; the
// extra boundaries admit in-module bootstraps. Grouped phases stay inside
// one sub-layer. When `cost` is given, each sub-layer gets a new cost id
// scaled by its share of the parent's depth.
std::vector<LayerSpec> expand_sublayers(const std::vector<LayerSpec>& layers,
                                        CostModel* cost = nullptr);

// Re-prices a plan and validates its level arithmetic. Strict mode requires
// the recorded input levels to match exactly; lenient mode replays the
// recorded actions on the actual levels (skipping upward drops) — useful for
// judging perturbed plans. Throws LevelUnderflow when a layer lacks levels.
double plan_cost(const std::vector<LayerSpec>& layers, const CostModel& cost,
                 const PlacementPlan& plan, int L, bool strict = true);

}  // namespace slotforge
