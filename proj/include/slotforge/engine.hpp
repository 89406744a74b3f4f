#pragma once

#include "slotforge/layouts.hpp"
#include "slotforge/types.hpp"

#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace slotforge {

// Global parameters of the slot engine: N slots per ciphertext (power of two)
// and a multiplicative level budget L. A ciphertext at level l supports l more
// multiplications before it must be bootstrapped.
struct EngineParams {
  int N = 0;
  int L = 0;
};

struct Ciphertext {
  SlotVector slots;
  int level = 0;
  std::optional<Layout> layout;
};

struct OpCounts {
  long long rotations = 0;
  long long hoisted_rotations = 0;  // subset of rotations issued with the hoisted hint
  long long ct_pt_mults = 0;
  long long ct_ct_mults = 0;
  long long additions = 0;
  long long bootstraps = 0;

  OpCounts& operator+=(const OpCounts& o) {
    rotations += o.rotations;
    hoisted_rotations += o.hoisted_rotations;
    ct_pt_mults += o.ct_pt_mults;
    ct_ct_mults += o.ct_ct_mults;
    additions += o.additions;
    bootstraps += o.bootstraps;
    return *this;
  }
  friend OpCounts operator+(OpCounts a, const OpCounts& b) { return a += b; }
  bool operator==(const OpCounts&) const = default;
};

// Thread-safe operation tally. Every increment lands both in the global total
// and in the currently active phase (default phase "(unphased)"), so the phase
// breakdown always sums to the total.
class CostLedger {
 public:
  static constexpr const char* kDefaultPhase = "(unphased)";

  void count_rotation(bool hoisted);
  void count_ct_pt_mult();
  void count_ct_ct_mult();
  void count_addition();
  void count_bootstrap();

  OpCounts totals() const;
  // Phases in first-use order, each with its accumulated counts.
  std::vector<std::pair<std::string, OpCounts>> phase_breakdown() const;
  OpCounts phase_totals(const std::string& phase) const;
  std::string current_phase() const;
  // True iff the per-phase counts sum exactly to the global totals.
  bool conserved() const;
  void reset();

  // RAII scope that routes counts to `phase`, restoring the previous phase on
  // destruction. Scopes nest.
  class PhaseScope {
   public:
    PhaseScope(CostLedger& ledger, std::string phase);
    ~PhaseScope();
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

   private:
    CostLedger& ledger_;
    std::string previous_;
  };

 private:
  void bump(const std::function<void(OpCounts&)>& f);
  std::string set_phase(std::string phase);

  mutable std::mutex mu_;
  OpCounts total_;
  std::vector<std::string> phase_order_;
  std::unordered_map<std::string, OpCounts> by_phase_;
  std::string current_ = kDefaultPhase;
};

struct RotationHint {
  bool hoisted = false;
};

// Abstract slot engine. Operations return fresh ciphertext values (handles are
// plain values; nothing is mutated in place) and account their cost in the
// ledger. Level rules:
//   add/sub:        level = min(a, b), free of depth
//   add_plain:      level unchanged
//   mul/mul_plain:  level = (min) - 1; throws LevelUnderflow at level 0
//   rotate:         level unchanged; rotation by 0 is a no-op and costs nothing
//   bootstrap:      level := target (1 <= target <= L), slots unchanged
//   level_drop:     level := target (0 <= target <= level), free
//   exact_transform: out-of-model oracle evaluation; zero cost, level unchanged
class Backend {
 public:
  explicit Backend(EngineParams params);
  virtual ~Backend() = default;

  const EngineParams& params() const { return params_; }
  int N() const { return params_.N; }
  int L() const { return params_.L; }
  CostLedger& ledger() { return ledger_; }
  const CostLedger& ledger() const { return ledger_; }
  CostLedger::PhaseScope phase(std::string name) { return {ledger_, std::move(name)}; }

  // Fresh encryption (off-ledger). level < 0 means the full budget L.
  Ciphertext encrypt(SlotVector slots, int level = -1) const;
  Ciphertext encrypt(SlotVector slots, int level, Layout layout) const;
  Ciphertext zeros(int level = -1) const;

  virtual Ciphertext add(const Ciphertext& a, const Ciphertext& b) = 0;
  virtual Ciphertext sub(const Ciphertext& a, const Ciphertext& b) = 0;
  virtual Ciphertext add_plain(const Ciphertext& a, const SlotVector& p) = 0;
  virtual Ciphertext mul(const Ciphertext& a, const Ciphertext& b) = 0;
  virtual Ciphertext mul_plain(const Ciphertext& a, const SlotVector& p) = 0;
  virtual Ciphertext rotate(const Ciphertext& a, int r, RotationHint hint = {}) = 0;
  virtual Ciphertext bootstrap(const Ciphertext& a, int target_level) = 0;
  virtual Ciphertext level_drop(const Ciphertext& a, int target_level) = 0;
  virtual Ciphertext exact_transform(const Ciphertext& a,
                                     const std::function<SlotVector(const SlotVector&)>& f) = 0;

  Ciphertext add_plain(const Ciphertext& a, Scalar c);
  Ciphertext mul_plain(const Ciphertext& a, Scalar c);

 protected:
  void check_slots(const SlotVector& s, const char* what) const;
  void check_ct(const Ciphertext& c, const char* what) const;

  EngineParams params_;
  mutable CostLedger ledger_;
};

// Cleartext slot-SIMD simulator: exact double arithmetic on slot arrays with
// faithful level tracking and cost accounting.
class SimBackend final : public Backend {
 public:
  using Backend::Backend;

  Ciphertext add(const Ciphertext& a, const Ciphertext& b) override;
  Ciphertext sub(const Ciphertext& a, const Ciphertext& b) override;
  Ciphertext add_plain(const Ciphertext& a, const SlotVector& p) override;
  Ciphertext mul(const Ciphertext& a, const Ciphertext& b) override;
  Ciphertext mul_plain(const Ciphertext& a, const SlotVector& p) override;
  Ciphertext rotate(const Ciphertext& a, int r, RotationHint hint = {}) override;
  Ciphertext bootstrap(const Ciphertext& a, int target_level) override;
  Ciphertext level_drop(const Ciphertext& a, int target_level) override;
  Ciphertext exact_transform(const Ciphertext& a,
                             const std::function<SlotVector(const SlotVector&)>& f) override;

  using Backend::add_plain;
  using Backend::mul_plain;
};

}  // namespace slotforge
