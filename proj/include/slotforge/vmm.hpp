#pragma once

#include "slotforge/engine.hpp"

#include <array>
#include <functional>

namespace slotforge {

// Read-only weight access with y = x^T W semantics: rows() is the input
// dimension, cols() the output dimension. at() must be cheap; plaintext
// diagonals are synthesized from it on the fly, so paper-scale shapes run with
// O(N) live memory instead of materializing O(d*N) of packed diagonals.
class WeightView {
 public:
  virtual ~WeightView() = default;
  virtual int rows() const = 0;
  virtual int cols() const = 0;
  virtual Scalar at(int r, int c) const = 0;
};

class MatrixWeight final : public WeightView {
 public:
  explicit MatrixWeight(Matrix w) : w_(std::move(w)) {}
  int rows() const override { return static_cast<int>(w_.rows()); }
  int cols() const override { return static_cast<int>(w_.cols()); }
  Scalar at(int r, int c) const override { return w_(r, c); }
  const Matrix& matrix() const { return w_; }

 private:
  Matrix w_;
};

class FunctorWeight final : public WeightView {
 public:
  FunctorWeight(int rows, int cols, std::function<Scalar(int, int)> f)
      : rows_(rows), cols_(cols), f_(std::move(f)) {}
  int rows() const override { return rows_; }
  int cols() const override { return cols_; }
  Scalar at(int r, int c) const override { return f_(r, c); }

 private:
  int rows_, cols_;
  std::function<Scalar(int, int)> f_;
};

struct BsgsSplit {
  int baby;
  int giant;
};
// baby = ceil(sqrt(k)), giant = ceil(k / baby).
BsgsSplit bsgs_split(long long k);

// Block-cyclic left shift by r inside every block-sized tile (block divides N):
// out[b*block + i] = in[b*block + (i+r) mod block]. Costs 2 rotations, 2 ct-pt
// mults and 1 level, except r % block == 0 which is the identity and free.
Ciphertext inner_rotate(Backend& be, const Ciphertext& x, int r, int block, RotationHint hint = {});

struct VmmOptions {
  bool bsgs = false;
  // Slot offset of the outputs within their stride window (interleaved only).
  int out_offset = 0;
  // Spend a level clearing the garbage slots now instead of leaving the output
  // flagged deferred_mask for the next elementwise multiplication to absorb.
  bool mask_output = false;
};

// Interleaved packing, the scheme of record: input x interleaved with
// d = padded rows, output interleaved with d = padded cols at out_offset.
// One multiplicative level (plus one if mask_output); exactly
// max(rows*cols/N, 1) ct-pt mults. Handles rectangular weights in both
// orientations and arbitrary input/output offsets; padding rows/cols up to
// powers of two is internal.
Ciphertext vmm_interleaved(Backend& be, const Ciphertext& x, const WeightView& w,
                           const VmmOptions& opts = {});

// Diagonal method on a contiguous input (square weights), the first baseline.
// Inner rotations make it 2 levels deep and 2(d-1) rotations without BSGS,
// 2(ceil(sqrt(d))-1) + 2(ceil(d/b)-1) with.
Ciphertext vmm_direct(Backend& be, const Ciphertext& x, const WeightView& w, bool bsgs = false);

// Whole-vector-copies input (Replicated layout; square weights), the second
// baseline: staircase staggering and group alignment both go through inner
// rotations, so it costs 3 levels.
Ciphertext vmm_replicated(Backend& be, const Ciphertext& x, const WeightView& w, bool bsgs = false);

// Token-batched square VMM: slot e*t + tau holds element e of token tau, all
// N slots carry data, and every rotation is a stride multiple so the token
// axis is preserved. One level, no masking needed, d ct-pt mults per
// ciphertext (amortized d/t per token, the same density as decode).
Ciphertext vmm_batch(Backend& be, const Ciphertext& x, const WeightView& w, bool bsgs = true);

// 1.0 exactly on the slots the layout declares valid.
SlotVector valid_mask(const Layout& ly, int N);

// Clears deferred garbage now (one ct-pt mult + level) if the flag is set.
Ciphertext apply_deferred_mask(Backend& be, const Ciphertext& x);

// Rotary position embedding over adjacent element pairs (2p, 2p+1) within each
// head: angle(pair p) = n * base^(-2p/d_head).
struct RoPEParams {
  double base = 10000.0;
  long long n = 0;  // absolute token position
  int d_head = 0;   // even
  int s = 0;        // slot shift of the fused evaluation; t is the value that
                    // survives the plaintext oracle (see rope tests)
};

// The three plaintexts of the fused rotary evaluation for a single token:
//   p0 = cos(angle) on valid slots, p1 = sin(angle) on even-element valid
//   slots, p2 = -sin(angle) on odd-element valid slots,
// combined as y = x*p0 + Rot(x*p1, -s) + Rot(x*p2, +s). All three are zero on
// invalid slots, which is what lets the rotary step absorb a deferred mask.
std::array<SlotVector, 3> rope_plaintexts(const RoPEParams& p, const Layout& ly, int N);

// What the elementwise multiplication after a vmm is about to do; the mask of
// the vmm's garbage slots is folded into that multiplication's plaintext so
// clearing costs no extra level.
enum class Successor { Rope, SiluMask, NormMask, VcacheMask };

// Performs the successor's elementwise multiplication with its coefficients
// zeroed on the layout's invalid slots. Rope runs the full fused rotary
// combination (3 ct-pt mults, 2 rotations, 1 level); the mask successors
// multiply by coeff (default all-ones) restricted to valid slots (1 ct-pt
// mult, 1 level). Output drops deferred_mask.
Ciphertext fused_extract(Backend& be, const Ciphertext& x, Successor succ,
                         const RoPEParams* rope = nullptr, const SlotVector* coeff = nullptr);

// Closed-form cost of one call, for tests and benches.
struct VmmCost {
  long long rotations = 0;
  long long ct_pt_mults = 0;
  int depth = 0;
};
VmmCost predict_interleaved_cost(const EngineParams& p, int rows, int cols, const VmmOptions& opts = {});
VmmCost predict_direct_cost(const EngineParams& p, int d, bool bsgs);
VmmCost predict_replicated_cost(const EngineParams& p, int d, bool bsgs);
VmmCost predict_batch_cost(const EngineParams& p, int d, bool bsgs);

}  // namespace slotforge
