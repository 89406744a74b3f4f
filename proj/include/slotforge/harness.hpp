#pragma once

// Toy gated-FFN transformer decoder (rotary embeddings, post-norm residual
// blocks) executed over the slot engine, with an exact plaintext reference,
// a plan-driven decode loop, batch prefill, and count-level reporting.
//
// Pipeline of one decode step, per block (these are also the ledger phase
// names): "Q, K, V" -> "RoPE & Cache" -> "QK^T" -> "Softmax" -> "Score*V" ->
// "Output projection" -> "Add & Norm" -> "Up & Gate projection" -> "SiLU" ->
// "Down projection" -> "Add & Norm". Prefill work lands in "Amortized
// Prefilling"; plan bootstraps in "Bootstrappings".
//
// Level conventions that keep the plan's chain model exact at runtime:
//   - every decode step starts from a fresh client-side encryption at L and
//     replays the same periodic plan, so cache entries are appended at the
//     same level each step;
//   - a plan bootstrap restores every ciphertext live at that boundary; at
//     boundaries where cache handles are still pending consumers (QK^T,
//     Softmax, Score*V) the handles are lifted too, so the ct-ct minimum
//     never dips below the chain;
//   - the residual adds run level-free at the tail of the projection stages,
//     so the "Add & Norm" boundaries carry a single live ciphertext.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/kv_attention.hpp"
#include "slotforge/nonlinear.hpp"
#include "slotforge/placement.hpp"
#include "slotforge/vmm.hpp"

namespace slotforge {

enum class NonlinearMode { Exact, Approx };

struct ModelConfig {
  int d = 64;
  int H = 4;
  int n_layers = 2;    // decoder blocks (the periodic block count)
  int ffn_alpha = 4;   // up/gate expansion factor
  int vocab = 32;
  int N = 256;
  int L = 13;
  double rope_base = 10000.0;
  NonlinearMode mode = NonlinearMode::Exact;
  std::uint64_t seed = 1;

  std::string to_json(int indent = 2) const;
  static ModelConfig from_json(const std::string& text);
};

// Throws ShapeMismatch unless the engine/attention invariants hold and the
// FFN width ffn_alpha*d fits the slot count.
void validate_model_config(const ModelConfig& cfg);

// cfg.seed unless the SLOTFORGE_SEED environment variable overrides it.
std::uint64_t effective_seed(const ModelConfig& cfg);

AttentionConfig attention_config(const ModelConfig& cfg, int n_max);

// --- weights -----------------------------------------------------------------

// One seeded Gaussian weight set. Entries are N(0,1)/sqrt(rows) (y = x^T W
// orientation); the attention score scale 1/sqrt(d_head) is folded into wq.
// Norm affines are gamma = 1 + 0.1*N(0,1), beta = 0.01*N(0,1). The embedding
// is N(0,1) and doubles as the tied unembedding. Draw order (one generator):
// embedding, then per block wq, wk, wv, wo, w_gate, w_up, w_down, gamma1,
// beta1, gamma2, beta2 — row-major each; this order is the determinism
// contract for seeded runs.
struct ModelWeights {
  struct Block {
    Matrix wq, wk, wv, wo;  // d x d
    Matrix w_gate, w_up;    // d x alpha*d
    Matrix w_down;          // alpha*d x d
    Vector gamma1, beta1, gamma2, beta2;
  };
  Matrix embedding;  // vocab x d
  std::vector<Block> blocks;
};

ModelWeights make_weights(const ModelConfig& cfg);
void save_weights(const std::filesystem::path& dir, const ModelWeights& w);
ModelWeights load_weights(const std::filesystem::path& dir, const ModelConfig& cfg);

// Uniform token ids in [0, vocab) from the config seed (stream independent of
// the weight draws).
std::vector<int> seeded_prompt(const ModelConfig& cfg, int n0);

// --- plaintext reference -----------------------------------------------------

// Ground truth for every encrypted run: exact double-precision forward with
// greedy argmax generation (ties break toward the lower token id).
struct ReferenceTrace {
  std::vector<int> tokens;           // prompt followed by generated ids
  std::vector<Vector> final_states;  // last-block output per position
  std::vector<Vector> logits;        // tied unembedding per position
  // per-block cache mirrors: rows are token positions
  std::vector<Matrix> K, V;
};

ReferenceTrace plaintext_reference(const ModelConfig& cfg, const ModelWeights& w,
                                   const std::vector<int>& prompt, int gen_len);

// --- nonlinear schedule -------------------------------------------------------

// The approximation specs a decode step runs under. Approx mode uses the
// shallow schedules (norm trimmed to 3 Goldschmidt iterations so the layer
// fits the desk level budget) with clamp-on-violation domains; exact mode
// marks every spec exact.
struct NonlinearSchedule {
  ApproxSpec softmax, norm, silu;
};
NonlinearSchedule nonlinear_schedule(const ModelConfig& cfg);

// --- plan construction ---------------------------------------------------------

// One block of the decode chain as solver layers, in pipeline order. Depths
// are the per-stage level consumption of the configured mode; ct_count is the
// size bound of the live set a bootstrap entering that stage must restore
// (cache handle bounds use n_max); the softmax and norm layers carry
// sub-layer traces in approx mode.
std::vector<LayerSpec> decoder_layer_specs(const ModelConfig& cfg, int n_max);

// Per-stage op counts and measured level consumption of one decode step,
// taken on a throwaway big-budget backend at cache occupancy n_max (the
// conservative calibration point; counts of qk/softmax scale with n').
struct ProbeResult {
  std::vector<OpCounts> counts;  // one per block stage
  std::vector<int> depths;       // measured levels consumed per stage
};
ProbeResult probe_decoder_counts(const ModelConfig& cfg, const ModelWeights& w, int n_max);

struct DecoderPlanInputs {
  std::vector<LayerSpec> block;
  std::vector<OpCounts> counts;
  CostModel cost;
};
DecoderPlanInputs decoder_plan_inputs(const ModelConfig& cfg, const ModelWeights& w, int n_max);

// Periodic solve over the block chain; the returned plan drives every decode
// step of a generation at capacity n_max.
PlacementPlan plan_decode(const ModelConfig& cfg, const ModelWeights& w, int n_max);

// --- encrypted run -------------------------------------------------------------

struct LevelEvent {
  int step = 0;  // decode step index within the generation
  int block = 0;
  std::string phase;
  int level_in = 0;
  int level_out = 0;
  std::optional<int> bootstrap_to;  // post-stage plan action, when taken
};

struct EncryptedState {
  std::vector<KVCache> caches;  // one per block
  Ciphertext x;                 // embedding of the next position to process
  long long position = 0;       // its token index
  int n_max = 0;                // cache capacity in tokens
};

// Batch prefill: caches the prompt tokens through every block (projections,
// rotary, scores, value pieces batched t tokens per ciphertext; per-lane
// norms and FFN) under the naive bootstrap-when-needed rule. Returns the
// final-block hidden states of the cached positions for validation. All
// counts land in the "Amortized Prefilling" phase.
std::vector<Vector> prefill_prompt(SimBackend& be, const ModelConfig& cfg,
                                   const ModelWeights& w, const std::vector<int>& tokens,
                                   EncryptedState& state, int n_max);

// One plan-driven decode step: consumes state.x through every block, appends
// this position's keys/values (advancing state.position), and returns the
// final-block hidden state ciphertext at the plan's terminal level. The chain
// level is checked against each plan entry on stage entry; a boundary
// bootstrap lifts every live ciphertext there, pending cache handles
// included. plan == nullptr free-runs without boundary actions (probe mode).
// trace appends one LevelEvent per stage; stage_counts appends that stage's
// ledger delta (the two norm stages merge under one ledger phase, so
// per-stage cost rows come from here). Throws LevelUnderflow on a plan/model
// mismatch.
Ciphertext run_decode_step(SimBackend& be, const ModelConfig& cfg, const ModelWeights& w,
                           const PlacementPlan* plan, EncryptedState& state,
                           std::vector<LevelEvent>* trace = nullptr,
                           std::vector<OpCounts>* stage_counts = nullptr);

// --- report ---------------------------------------------------------------------

struct PhaseRow {
  std::string name;
  OpCounts ops;
  int levels_in = -1;  // -1: not applicable
  int levels_out = -1;
};

struct Report {
  ModelConfig config;
  std::vector<int> prompt;
  std::vector<int> generated;
  std::vector<PhaseRow> phases;
  std::vector<LevelEvent> level_trace;
  double max_abs_error = 0.0;  // vs the plaintext reference (states and logits)
  double predicted_plan_cost_ms = 0.0;
  double measured_cost_ms = 0.0;  // ledger totals priced at the calibration units
  long long bootstrap_count = 0;  // executed bootstrap operations

  std::string to_json(int indent = 2) const;
  // Pinned columns:
  // phase,rotations,hoisted,ctpt_mult,ctct_mult,adds,bootstraps,levels_in,levels_out
  std::string to_csv() const;
};

// Writes <stem>.json and <stem>.csv; throws on non-finite error fields.
void emit_report(const Report& r, const std::filesystem::path& stem);

// Prefill n0 - 1 prompt tokens, then gen_len plan-driven greedy decode steps
// (step k processes position n0 - 1 + k and emits token n0 + k). The plan
// defaults to plan_decode at capacity n0 + gen_len when absent.
Report run_generation(const ModelConfig& cfg, const ModelWeights& w,
                      const std::vector<int>& prompt, int gen_len,
                      const PlacementPlan* plan = nullptr);

// Convenience: seeded weights and prompt from the config (SLOTFORGE_SEED
// honored), internally solved plan.
Report run_generation(const ModelConfig& cfg, int n0, int gen_len);

}  // namespace slotforge
