#pragma once

// Homomorphic-friendly approximations of the transformer nonlinearities over
// packed ciphertexts: Chebyshev-basis polynomial evaluation at balanced
// multiplicative depth, Goldschmidt reciprocal and reciprocal square root,
// an overflow-free scaled exponential, and the softmax / layer-norm / SiLU
// compositions that consume them.
//
// Conventions:
//   - Every function's consumed level count equals its declared depth
//     (see *_depth below) exactly; tests assert the level trace.
//   - Valid-slot masks are folded into polynomial coefficients, so outputs
//     carry exact zeros on invalid slots at no extra level.
//   - Domain handling: strict specs throw DomainViolation when a valid slot
//     leaves spec domain; non-strict specs clamp (zero cost, logged once).

#include <functional>
#include <string>
#include <vector>

#include "slotforge/engine.hpp"
#include "slotforge/layouts.hpp"

namespace slotforge {

struct ApproxSpec {
  std::string function;  // softmax|norm|silu|gelu|inverse|rsqrt|exp
  double domain_lo = 0.0, domain_hi = 1.0;
  int depth_budget = 0;          // >= the schedule's minimum (0 = derive)
  int iterations = 7;            // Goldschmidt factor count / iteration count
  std::vector<int> degrees;      // polynomial degree schedule: {deg} or {deg, r}
  double scale_in = 1.0, scale_out = 1.0;
  bool strict_domain = true;     // throw on domain violation vs clamp-and-log
  bool exact = false;            // oracle mode: true function, zero depth
};

std::string approx_spec_to_json(const ApproxSpec& spec);
ApproxSpec approx_spec_from_json(const std::string& text);

// Preset schedules: "desk-default" (unit-test precision targets) and
// "desk-shallow" (short schedules for placement studies).
ApproxSpec desk_spec(const std::string& preset, const std::string& function);

// --- polynomial machinery ---------------------------------------------------

// Least-squares fit of f over a dense uniform grid on [lo, hi] in the
// Chebyshev basis of the interval; returns degree+1 coefficients.
std::vector<double> fit_cheb_ls(const std::function<double(double)>& f, double lo, double hi,
                                int degree);

// Largest pointwise |fit - f| on a dense grid (fit quality probe).
double cheb_fit_error(const std::vector<double>& coeffs, const std::function<double(double)>& f,
                      double lo, double hi);

// Depth of one eval_cheb call: 1 (domain affine) + ceil(log2(#coeffs)).
int poly_depth(int degree);

// Evaluate the Chebyshev expansion at balanced depth. When coeff_mask is
// given every leaf coefficient is multiplied by it slot-wise, making the
// result exactly zero wherever the mask is, at no extra level.
Ciphertext eval_cheb(Backend& be, const Ciphertext& x, double lo, double hi,
                     const std::vector<double>& coeffs, const SlotVector* coeff_mask = nullptr);

// --- iterative kernels -------------------------------------------------------

enum class GoldschmidtKind { Inverse, Rsqrt };

// Declared depth: inverse = iterations (+1 if scale_in != 1);
// rsqrt = 2*iterations (+1 if scale_in != 1).
int goldschmidt_depth(GoldschmidtKind kind, const ApproxSpec& spec);

// Slot-wise ~1/x or ~1/sqrt(x) for spec.scale_in * x in spec.domain, a
// subinterval of (0,1). Inverse relative error is exactly
// (1 - lo)^(2^iterations) at the domain floor.
Ciphertext goldschmidt(Backend& be, const Ciphertext& x, GoldschmidtKind kind,
                       const ApproxSpec& spec);

// Declared depth: 1 + ceil(log2(deg+1)) + r with degrees = {deg, r}.
int exp_depth(const ApproxSpec& spec);

// Overflow-free scaled exponential exp(x - domain_hi), evaluated as
// p((x - domain_hi)/2^r)^(2^r); the constant factor cancels inside softmax.
// mask (optional) is folded into the polynomial coefficients.
Ciphertext approx_exp(Backend& be, const Ciphertext& x, const ApproxSpec& spec,
                      const SlotVector* mask = nullptr);

// --- composed functions ------------------------------------------------------

// Declared depth: exp_depth + 1 (normalizer mask) + iterations + 1 (product).
int softmax_depth(const ApproxSpec& spec);

// Softmax over packed score maps (per-head blocks of group_tokens = N/heads
// slots; map m holds scores [m*gt, m*gt + cnt_m) per head, zeros elsewhere).
// spec.scale_in (2^-sigma) is folded into the exponential's coefficient mask
// so the normalizer sum lands in the Goldschmidt domain. Output maps keep the
// packing with exact zeros outside the valid range.
std::vector<Ciphertext> approx_softmax(Backend& be, const std::vector<Ciphertext>& maps,
                                       int n_prime, int heads, const ApproxSpec& spec);

// Single-ciphertext convenience: valid scores in the first n_prime slots.
Ciphertext approx_softmax(Backend& be, const Ciphertext& scores, int n_prime,
                          const ApproxSpec& spec);

// Declared depth: 5 + 2*iterations.
int norm_depth(const ApproxSpec& spec);

// LayerNorm over the interleaved hidden vector (logical width = gamma size):
// mean subtraction, variance, Goldschmidt rsqrt, affine. Requires a clean
// input (a preceding vmm's garbage is cleared through fused_extract's
// norm-mask target before this call). spec.domain bounds the scaled
// (var + eps) * scale_in seen by rsqrt.
Ciphertext approx_norm(Backend& be, const Ciphertext& x, const Vector& gamma, const Vector& beta,
                       double eps, const ApproxSpec& spec);

// Declared depth: 1 + ceil(log2(deg+1)) with degrees = {deg}.
int silu_depth(const ApproxSpec& spec);

// Slot-wise composite-polynomial SiLU (or GeLU via spec.function == "gelu").
// The layout's valid mask — and extra_coeff, when given — are fused into the
// coefficients, so deferred vmm garbage is cleared here for free and invalid
// slots come out exactly zero.
Ciphertext approx_silu(Backend& be, const Ciphertext& x, const ApproxSpec& spec,
                       const SlotVector* extra_coeff = nullptr);

// --- exact-mode oracles (zero depth, layout-aware masking) ------------------

// Slot-wise true function; invalid slots of a laid-out ciphertext come out
// zero and the layout is marked clean.
Ciphertext exact_apply(Backend& be, const Ciphertext& x, const std::function<double(double)>& f);
Ciphertext exact_silu(Backend& be, const Ciphertext& x);
Ciphertext exact_gelu(Backend& be, const Ciphertext& x);
Ciphertext exact_norm(Backend& be, const Ciphertext& x, const Vector& gamma, const Vector& beta,
                      double eps);

// --- sub-layer traces for the placement optimizer ---------------------------

struct SubLayerPhase {
  std::string name;
  int depth = 0;      // positive
  int ct_count = 1;   // live ciphertexts a bootstrap here must restore
  bool interruptible = false;  // a bootstrap may be inserted at this phase's input
};

struct SubLayerTrace {
  std::vector<SubLayerPhase> phases;
  int total_depth() const;
};

// Deterministic decomposition of a function's schedule into sub-layers;
// grouped compute blocks (polynomial evaluation, Goldschmidt) are
// non-interruptible. Exact specs yield an empty trace.
SubLayerTrace sublayer_trace(const std::string& function, const ApproxSpec& spec);

}  // namespace slotforge
