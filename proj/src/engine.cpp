#include "slotforge/engine.hpp"

#include <algorithm>

namespace slotforge {

void CostLedger::bump(const std::function<void(OpCounts&)>& f) {
  std::lock_guard<std::mutex> lock(mu_);
  f(total_);
  auto it = by_phase_.find(current_);
  if (it == by_phase_.end()) {
    phase_order_.push_back(current_);
    it = by_phase_.emplace(current_, OpCounts{}).first;
  }
  f(it->second);
}

void CostLedger::count_rotation(bool hoisted) {
  bump([hoisted](OpCounts& c) {
    ++c.rotations;
    if (hoisted) ++c.hoisted_rotations;
  });
}

void CostLedger::count_ct_pt_mult() {
  bump([](OpCounts& c) { ++c.ct_pt_mults; });
}

void CostLedger::count_ct_ct_mult() {
  bump([](OpCounts& c) { ++c.ct_ct_mults; });
}

void CostLedger::count_addition() {
  bump([](OpCounts& c) { ++c.additions; });
}

void CostLedger::count_bootstrap() {
  bump([](OpCounts& c) { ++c.bootstraps; });
}

OpCounts CostLedger::totals() const {
  std::lock_guard<std::mutex> lock(mu_);
  return total_;
}

std::vector<std::pair<std::string, OpCounts>> CostLedger::phase_breakdown() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::pair<std::string, OpCounts>> out;
  out.reserve(phase_order_.size());
  for (const auto& name : phase_order_) out.emplace_back(name, by_phase_.at(name));
  return out;
}

OpCounts CostLedger::phase_totals(const std::string& phase) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = by_phase_.find(phase);
  return it == by_phase_.end() ? OpCounts{} : it->second;
}

std::string CostLedger::current_phase() const {
  std::lock_guard<std::mutex> lock(mu_);
  return current_;
}

bool CostLedger::conserved() const {
  std::lock_guard<std::mutex> lock(mu_);
  OpCounts sum;
  for (const auto& [name, counts] : by_phase_) sum += counts;
  return sum == total_;
}

void CostLedger::reset() {
  std::lock_guard<std::mutex> lock(mu_);
  total_ = OpCounts{};
  by_phase_.clear();
  phase_order_.clear();
  current_ = kDefaultPhase;
}

std::string CostLedger::set_phase(std::string phase) {
  std::lock_guard<std::mutex> lock(mu_);
  std::string prev = std::move(current_);
  current_ = std::move(phase);
  return prev;
}

CostLedger::PhaseScope::PhaseScope(CostLedger& ledger, std::string phase)
    : ledger_(ledger), previous_(ledger.set_phase(std::move(phase))) {}

CostLedger::PhaseScope::~PhaseScope() { ledger_.set_phase(std::move(previous_)); }

Backend::Backend(EngineParams params) : params_(params) {
  if (!is_pow2(params_.N)) throw ShapeMismatch("engine: N must be a power of two");
  if (params_.L < 1) throw InvalidTarget("engine: level budget L must be >= 1");
}

void Backend::check_slots(const SlotVector& s, const char* what) const {
  if (s.size() != params_.N)
    throw ShapeMismatch(std::string(what) + ": expected " + std::to_string(params_.N) + " slots, got " +
                        std::to_string(s.size()));
}

void Backend::check_ct(const Ciphertext& c, const char* what) const {
  check_slots(c.slots, what);
  if (c.level < 0 || c.level > params_.L)
    throw InvalidTarget(std::string(what) + ": ciphertext level " + std::to_string(c.level) + " out of [0, L]");
}

Ciphertext Backend::encrypt(SlotVector slots, int level) const {
  if (level < 0) level = params_.L;
  check_slots(slots, "encrypt");
  if (level > params_.L) throw InvalidTarget("encrypt: level exceeds budget L");
  return Ciphertext{std::move(slots), level, std::nullopt};
}

Ciphertext Backend::encrypt(SlotVector slots, int level, Layout layout) const {
  validate_layout(layout, params_.N);
  Ciphertext c = encrypt(std::move(slots), level);
  c.layout = layout;
  return c;
}

Ciphertext Backend::zeros(int level) const { return encrypt(SlotVector::Zero(params_.N), level); }

Ciphertext Backend::add_plain(const Ciphertext& a, Scalar c) {
  return add_plain(a, SlotVector::Constant(params_.N, c));
}

Ciphertext Backend::mul_plain(const Ciphertext& a, Scalar c) {
  return mul_plain(a, SlotVector::Constant(params_.N, c));
}

namespace {

// Binary results keep a layout only when both operands agree on it.
std::optional<Layout> merge_layouts(const Ciphertext& a, const Ciphertext& b) {
  if (a.layout && b.layout && *a.layout == *b.layout) return a.layout;
  return std::nullopt;
}

}  // namespace

Ciphertext SimBackend::add(const Ciphertext& a, const Ciphertext& b) {
  check_ct(a, "add");
  check_ct(b, "add");
  ledger_.count_addition();
  return Ciphertext{a.slots + b.slots, std::min(a.level, b.level), merge_layouts(a, b)};
}

Ciphertext SimBackend::sub(const Ciphertext& a, const Ciphertext& b) {
  check_ct(a, "sub");
  check_ct(b, "sub");
  ledger_.count_addition();
  return Ciphertext{a.slots - b.slots, std::min(a.level, b.level), merge_layouts(a, b)};
}

Ciphertext SimBackend::add_plain(const Ciphertext& a, const SlotVector& p) {
  check_ct(a, "add_plain");
  check_slots(p, "add_plain");
  ledger_.count_addition();
  return Ciphertext{a.slots + p, a.level, a.layout};
}

Ciphertext SimBackend::mul(const Ciphertext& a, const Ciphertext& b) {
  check_ct(a, "mul");
  check_ct(b, "mul");
  const int level = std::min(a.level, b.level);
  if (level <= 0) throw LevelUnderflow("mul: no multiplicative level left");
  ledger_.count_ct_ct_mult();
  return Ciphertext{a.slots * b.slots, level - 1, merge_layouts(a, b)};
}

Ciphertext SimBackend::mul_plain(const Ciphertext& a, const SlotVector& p) {
  check_ct(a, "mul_plain");
  check_slots(p, "mul_plain");
  if (a.level <= 0) throw LevelUnderflow("mul_plain: no multiplicative level left");
  ledger_.count_ct_pt_mult();
  return Ciphertext{a.slots * p, a.level - 1, a.layout};
}

Ciphertext SimBackend::rotate(const Ciphertext& a, int r, RotationHint hint) {
  check_ct(a, "rotate");
  const int n = params_.N;
  const int shift = static_cast<int>(pos_mod(r, n));
  if (shift == 0) return a;
  ledger_.count_rotation(hint.hoisted);
  SlotVector out(n);
  out.head(n - shift) = a.slots.tail(n - shift);
  out.tail(shift) = a.slots.head(shift);
  return Ciphertext{std::move(out), a.level, std::nullopt};
}

Ciphertext SimBackend::bootstrap(const Ciphertext& a, int target_level) {
  check_ct(a, "bootstrap");
  if (target_level < 1 || target_level > params_.L)
    throw InvalidTarget("bootstrap: target level " + std::to_string(target_level) + " outside [1, L]");
  ledger_.count_bootstrap();
  return Ciphertext{a.slots, target_level, a.layout};
}

Ciphertext SimBackend::level_drop(const Ciphertext& a, int target_level) {
  check_ct(a, "level_drop");
  if (target_level < 0 || target_level > a.level)
    throw InvalidTarget("level_drop: target level " + std::to_string(target_level) + " outside [0, level]");
  return Ciphertext{a.slots, target_level, a.layout};
}

Ciphertext SimBackend::exact_transform(const Ciphertext& a,
                                       const std::function<SlotVector(const SlotVector&)>& f) {
  check_ct(a, "exact_transform");
  SlotVector out = f(a.slots);
  check_slots(out, "exact_transform result");
  return Ciphertext{std::move(out), a.level, a.layout};
}

}  // namespace slotforge
