#include "slotforge/nonlinear.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include "json.hpp"

namespace slotforge {

namespace {

double silu_ref(double v) { return v / (1.0 + std::exp(-v)); }
double gelu_ref(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

int ceil_log2(int n) {
  int k = 0;
  while ((1 << k) < n) ++k;
  return k;
}

void validate_domain(const ApproxSpec& spec, const char* what) {
  if (!(spec.domain_lo < spec.domain_hi))
    throw ShapeMismatch(std::string(what) + ": empty domain [" + std::to_string(spec.domain_lo) +
                        ", " + std::to_string(spec.domain_hi) + "]");
}

void check_budget(const ApproxSpec& spec, int depth, const char* what) {
  if (spec.depth_budget > 0 && spec.depth_budget < depth)
    throw InfeasibleLayer(std::string(what) + ": schedule needs depth " + std::to_string(depth) +
                          " but depth_budget is " + std::to_string(spec.depth_budget));
}

// Domain guard over the slots where `where` is nonzero (all slots when null).
// Strict specs throw; otherwise offending slots are clamped (zero cost) and a
// line is logged.
Ciphertext guard_domain(Backend& be, const Ciphertext& c, const ApproxSpec& spec,
                        const SlotVector* where, const char* what) {
  const double lo = spec.domain_lo, hi = spec.domain_hi;
  long long bad = 0;
  double worst = 0.0;
  for (int i = 0; i < c.slots.size(); ++i) {
    if (where && (*where)[i] == 0.0) continue;
    const double v = c.slots[i];
    if (v < lo || v > hi) {
      ++bad;
      worst = std::max(worst, std::max(lo - v, v - hi));
    }
  }
  if (bad == 0) return c;
  if (spec.strict_domain)
    throw DomainViolation(std::string(what) + ": " + std::to_string(bad) +
                          " slot(s) outside [" + std::to_string(lo) + ", " + std::to_string(hi) +
                          "], worst excess " + std::to_string(worst));
  std::fprintf(stderr, "[nonlinear] %s: clamped %lld slot(s) to [%g, %g]\n", what, bad, lo, hi);
  SlotVector sel = where ? *where : SlotVector::Ones(c.slots.size());
  return be.exact_transform(c, [lo, hi, sel](const SlotVector& s) {
    SlotVector out = s;
    for (int i = 0; i < out.size(); ++i)
      if (sel[i] != 0.0) out[i] = std::clamp(out[i], lo, hi);
    return out;
  });
}

// --- Chebyshev-basis evaluation at balanced depth ---------------------------

// Divide a Chebyshev-coefficient polynomial by T_m (m a power of two):
// p = q * T_m + r with deg r < m, using 2 T_m T_k = T_{m+k} + T_{|m-k|}.
void cheb_divmod(const std::vector<double>& c, int m, std::vector<double>& q,
                 std::vector<double>& r) {
  std::vector<double> work = c;
  const int n = static_cast<int>(c.size());
  q.assign(n - m, 0.0);
  for (int deg = n - 1; deg >= m; --deg) {
    const double a = work[deg];
    work[deg] = 0.0;
    if (deg == m) {
      q[0] += a;
    } else {
      q[deg - m] += 2.0 * a;
      work[std::abs(deg - 2 * m)] -= a;
    }
  }
  r.assign(work.begin(), work.begin() + m);
}

// Either a bare coefficient (no ciphertext factor yet) or an evaluated part.
struct EvalPart {
  std::optional<Ciphertext> ct;
  double plain = 0.0;
};

SlotVector coeff_plain(double c, const SlotVector* mask, int N) {
  return mask ? SlotVector(*mask * c) : SlotVector(SlotVector::Constant(N, c));
}

EvalPart eval_cheb_rec(Backend& be, const std::vector<double>& coeffs,
                       const std::vector<Ciphertext>& tpow, const SlotVector* mask) {
  const int n = static_cast<int>(coeffs.size());
  if (n == 1) return {std::nullopt, coeffs[0]};
  if (n == 2) {
    Ciphertext ct = be.mul_plain(tpow[0], coeff_plain(coeffs[1], mask, be.N()));
    ct = be.add_plain(ct, coeff_plain(coeffs[0], mask, be.N()));
    return {ct, 0.0};
  }
  const int m = 1 << (ceil_log2(n) - 1);
  std::vector<double> qc, rc;
  cheb_divmod(coeffs, m, qc, rc);
  const Ciphertext& tm = tpow[static_cast<size_t>(log2_exact(m))];
  EvalPart qp = eval_cheb_rec(be, qc, tpow, mask);
  Ciphertext prod = qp.ct ? be.mul(tm, *qp.ct)
                          : be.mul_plain(tm, coeff_plain(qp.plain, mask, be.N()));
  EvalPart rp = eval_cheb_rec(be, rc, tpow, mask);
  return {be.add(prod, *rp.ct), 0.0};
}

ApproxSpec gs_subspec(const ApproxSpec& parent, double lo, double hi, int iterations) {
  ApproxSpec sub;
  sub.function = "inverse";
  sub.domain_lo = lo;
  sub.domain_hi = hi;
  sub.iterations = iterations;
  sub.strict_domain = parent.strict_domain;
  return sub;
}

void require_degrees(const ApproxSpec& spec, size_t count, const char* what) {
  if (spec.degrees.size() != count)
    throw ShapeMismatch(std::string(what) + ": expected " + std::to_string(count) +
                        " degree entries, got " + std::to_string(spec.degrees.size()));
  for (size_t i = 0; i < count; ++i)
    if (spec.degrees[i] < (i == 0 ? 1 : 0))
      throw ShapeMismatch(std::string(what) + ": bad degree schedule entry " +
                          std::to_string(spec.degrees[i]));
}

// Cyclic fold: out[i] = sum over the stride class {i, i+step, i+2*step, ...}
// covering `count` terms (count a power of two).
Ciphertext fold_stride(Backend& be, Ciphertext acc, int step, int count) {
  for (int s = step; s < step * count; s <<= 1) acc = be.add(acc, be.rotate(acc, s));
  return acc;
}

// Replicate each block-start value across its block of `count * step` slots.
Ciphertext replicate_block(Backend& be, Ciphertext acc, int step, int count) {
  for (int s = step; s < step * count; s <<= 1) acc = be.add(acc, be.rotate(acc, -s));
  return acc;
}

const Layout& require_norm_layout(const Ciphertext& x, const char* what) {
  if (!x.layout || x.layout->kind != LayoutKind::Interleaved)
    throw LayoutMismatch(std::string(what) + ": interleaved input layout required");
  if (x.layout->heads != 1)
    throw LayoutMismatch(std::string(what) + ": head-merged input required (heads == 1)");
  if (x.layout->deferred_mask)
    throw LayoutMismatch(std::string(what) +
                         ": clean input required (clear vmm garbage via fused_extract first)");
  return *x.layout;
}

SlotVector logical_mask(const Layout& ly, int N, int d_log, double value) {
  SlotVector m = SlotVector::Zero(N);
  for (int e = 0; e < d_log; ++e) m[(static_cast<long long>(e) * ly.t + ly.offset) % N] = value;
  return m;
}

SlotVector encode_logical(const Layout& ly, int N, const Vector& v, double scale) {
  SlotVector m = SlotVector::Zero(N);
  for (int e = 0; e < v.size(); ++e)
    m[(static_cast<long long>(e) * ly.t + ly.offset) % N] = v[e] * scale;
  return m;
}

}  // namespace

// --- spec serialization ------------------------------------------------------

std::string approx_spec_to_json(const ApproxSpec& spec) {
  nlohmann::json j;
  j["function"] = spec.function;
  j["domain"] = {spec.domain_lo, spec.domain_hi};
  j["depth_budget"] = spec.depth_budget;
  j["iterations"] = spec.iterations;
  j["degrees"] = spec.degrees;
  j["scale_in"] = spec.scale_in;
  j["scale_out"] = spec.scale_out;
  j["strict_domain"] = spec.strict_domain;
  j["exact"] = spec.exact;
  return j.dump(2);
}

ApproxSpec approx_spec_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ApproxSpec spec;
  spec.function = j.at("function").get<std::string>();
  if (j.contains("domain")) {
    spec.domain_lo = j["domain"].at(0).get<double>();
    spec.domain_hi = j["domain"].at(1).get<double>();
  }
  spec.depth_budget = j.value("depth_budget", 0);
  spec.iterations = j.value("iterations", 7);
  spec.degrees = j.value("degrees", std::vector<int>{});
  spec.scale_in = j.value("scale_in", 1.0);
  spec.scale_out = j.value("scale_out", 1.0);
  spec.strict_domain = j.value("strict_domain", true);
  spec.exact = j.value("exact", false);
  return spec;
}

ApproxSpec desk_spec(const std::string& preset, const std::string& function) {
  const bool shallow = preset == "desk-shallow";
  if (!shallow && preset != "desk-default")
    throw ShapeMismatch("desk_spec: unknown preset '" + preset + "'");
  ApproxSpec s;
  s.function = function;
  if (function == "softmax") {
    s.domain_lo = -8.0;
    s.domain_hi = 4.0;
    s.degrees = shallow ? std::vector<int>{3, 1} : std::vector<int>{7, 2};
    s.iterations = shallow ? 6 : 14;
    s.scale_in = 1.0 / 32.0;
    s.depth_budget = softmax_depth(s);
  } else if (function == "norm") {
    s.domain_lo = 0.02;
    s.domain_hi = 0.95;
    s.iterations = shallow ? 4 : 10;
    s.scale_in = 1.0 / 8.0;
    s.depth_budget = norm_depth(s);
  } else if (function == "silu" || function == "gelu") {
    s.domain_lo = -16.0;
    s.domain_hi = 12.0;
    s.degrees = {shallow ? 15 : 63};
    s.depth_budget = silu_depth(s);
  } else if (function == "exp") {
    s.domain_lo = -8.0;
    s.domain_hi = 4.0;
    s.degrees = shallow ? std::vector<int>{3, 1} : std::vector<int>{7, 2};
    s.depth_budget = exp_depth(s);
  } else if (function == "inverse") {
    s.domain_lo = 1.0 / 64.0;
    s.domain_hi = 1.0;
    s.iterations = shallow ? 6 : 9;
    s.depth_budget = goldschmidt_depth(GoldschmidtKind::Inverse, s);
  } else if (function == "rsqrt") {
    s.domain_lo = 1.0 / 16.0;
    s.domain_hi = 1.0;
    s.iterations = shallow ? 4 : 8;
    s.depth_budget = goldschmidt_depth(GoldschmidtKind::Rsqrt, s);
  } else {
    throw ShapeMismatch("desk_spec: unknown function '" + function + "'");
  }
  return s;
}

// --- polynomial machinery ----------------------------------------------------

std::vector<double> fit_cheb_ls(const std::function<double(double)>& f, double lo, double hi,
                                int degree) {
  if (degree < 1) throw ShapeMismatch("fit_cheb_ls: degree must be >= 1");
  if (!(lo < hi)) throw ShapeMismatch("fit_cheb_ls: empty interval");
  const int cols = degree + 1;
  const int rows = std::max(8 * cols, 256);
  Eigen::MatrixXd A(rows, cols);
  Eigen::VectorXd b(rows);
  for (int i = 0; i < rows; ++i) {
    const double x = lo + (hi - lo) * i / (rows - 1);
    const double z = (2.0 * x - lo - hi) / (hi - lo);
    double tk2 = 1.0, tk1 = z;
    A(i, 0) = 1.0;
    if (cols > 1) A(i, 1) = z;
    for (int k = 2; k < cols; ++k) {
      const double tk = 2.0 * z * tk1 - tk2;
      A(i, k) = tk;
      tk2 = tk1;
      tk1 = tk;
    }
    b[i] = f(x);
  }
  Eigen::VectorXd c = A.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(b);
  return {c.data(), c.data() + c.size()};
}

namespace {
double cheb_value(const std::vector<double>& coeffs, double z) {
  // Clenshaw recurrence.
  double b1 = 0.0, b2 = 0.0;
  for (int k = static_cast<int>(coeffs.size()) - 1; k >= 1; --k) {
    const double t = 2.0 * z * b1 - b2 + coeffs[static_cast<size_t>(k)];
    b2 = b1;
    b1 = t;
  }
  return z * b1 - b2 + coeffs[0];
}
}  // namespace

double cheb_fit_error(const std::vector<double>& coeffs, const std::function<double(double)>& f,
                      double lo, double hi) {
  double worst = 0.0;
  const int samples = 4096;
  for (int i = 0; i <= samples; ++i) {
    const double x = lo + (hi - lo) * i / samples;
    const double z = (2.0 * x - lo - hi) / (hi - lo);
    worst = std::max(worst, std::abs(cheb_value(coeffs, z) - f(x)));
  }
  return worst;
}

int poly_depth(int degree) { return 1 + ceil_log2(degree + 1); }

Ciphertext eval_cheb(Backend& be, const Ciphertext& x, double lo, double hi,
                     const std::vector<double>& coeffs, const SlotVector* coeff_mask) {
  if (coeffs.size() < 2) throw ShapeMismatch("eval_cheb: need at least degree 1");
  if (!(lo < hi)) throw ShapeMismatch("eval_cheb: empty interval");
  // Affine map onto T_1's interval [-1, 1].
  Ciphertext t1 = be.add_plain(be.mul_plain(x, 2.0 / (hi - lo)), (-lo - hi) / (hi - lo));
  std::vector<Ciphertext> tpow{t1};
  const int top = ceil_log2(static_cast<int>(coeffs.size())) - 1;
  for (int j = 1; j <= top; ++j) {
    Ciphertext sq = be.mul(tpow.back(), tpow.back());
    tpow.push_back(be.add_plain(be.add(sq, sq), -1.0));
  }
  EvalPart part = eval_cheb_rec(be, coeffs, tpow, coeff_mask);
  Ciphertext out = *part.ct;
  out.layout = x.layout;
  return out;
}

// --- Goldschmidt kernels -------------------------------------------------------

int goldschmidt_depth(GoldschmidtKind kind, const ApproxSpec& spec) {
  const int scale = spec.scale_in != 1.0 ? 1 : 0;
  return scale + (kind == GoldschmidtKind::Inverse ? spec.iterations : 2 * spec.iterations);
}

Ciphertext goldschmidt(Backend& be, const Ciphertext& x, GoldschmidtKind kind,
                       const ApproxSpec& spec) {
  validate_domain(spec, "goldschmidt");
  if (spec.domain_lo <= 0.0 || spec.domain_hi > 1.0)
    throw ShapeMismatch("goldschmidt: domain must be a subinterval of (0, 1]");
  if (spec.iterations < 2) throw ShapeMismatch("goldschmidt: need at least 2 iterations");
  check_budget(spec, goldschmidt_depth(kind, spec), "goldschmidt");

  Ciphertext xs = spec.scale_in != 1.0 ? be.mul_plain(x, spec.scale_in) : x;
  const SlotVector* sel = nullptr;
  SlotVector valid;
  if (xs.layout) {
    valid = make_mask(*xs.layout, be.N(), MaskKind::ValidSlots);
    sel = &valid;
  }
  xs = guard_domain(be, xs, spec, sel, "goldschmidt");

  if (kind == GoldschmidtKind::Inverse) {
    // 1/x = prod_i (1 + v^(2^i)) with v = 1 - x; `iterations` factors total.
    Ciphertext ones = be.add_plain(be.zeros(xs.level), 1.0);
    Ciphertext v = be.sub(ones, xs);
    Ciphertext y = be.add_plain(v, 1.0);
    for (int i = 1; i < spec.iterations; ++i) {
      v = be.mul(v, v);
      y = be.mul(y, be.add_plain(v, 1.0));
    }
    y.layout = x.layout;
    return y;
  }

  // Coupled Newton iteration: g -> sqrt(x), h -> 1/(2 sqrt(x)).
  Ciphertext y1 = be.add_plain(be.mul_plain(xs, -0.5), 1.5);
  Ciphertext h = be.add_plain(be.mul_plain(xs, -0.25), 0.75);
  Ciphertext g = be.mul(xs, y1);
  for (int i = 1; i < spec.iterations; ++i) {
    Ciphertext gh = be.mul(g, h);
    Ciphertext r = be.add_plain(be.sub(be.zeros(gh.level), gh), 0.5);
    g = be.mul(g, be.add_plain(r, 1.0));
    h = be.mul(h, be.add_plain(r, 1.0));
  }
  Ciphertext y = be.add(h, h);
  y.layout = x.layout;
  return y;
}

// --- exponential ---------------------------------------------------------------

int exp_depth(const ApproxSpec& spec) {
  require_degrees(spec, 2, "exp_depth");
  return poly_depth(spec.degrees[0]) + spec.degrees[1];
}

Ciphertext approx_exp(Backend& be, const Ciphertext& x, const ApproxSpec& spec,
                      const SlotVector* mask) {
  validate_domain(spec, "approx_exp");
  require_degrees(spec, 2, "approx_exp");
  check_budget(spec, exp_depth(spec), "approx_exp");
  const int deg = spec.degrees[0], r = spec.degrees[1];
  const double M = spec.domain_hi, scale = 1 << r;
  Ciphertext xg = guard_domain(be, x, spec, mask, "approx_exp");
  std::vector<double> coeffs =
      fit_cheb_ls([&](double v) { return std::exp((v - M) / scale); }, spec.domain_lo,
                  spec.domain_hi, deg);
  Ciphertext p = eval_cheb(be, xg, spec.domain_lo, spec.domain_hi, coeffs, mask);
  for (int i = 0; i < r; ++i) p = be.mul(p, p);
  return p;
}

// --- softmax --------------------------------------------------------------------

int softmax_depth(const ApproxSpec& spec) {
  return exp_depth(spec) + 1 + spec.iterations + 1;
}

std::vector<Ciphertext> approx_softmax(Backend& be, const std::vector<Ciphertext>& maps,
                                       int n_prime, int heads, const ApproxSpec& spec) {
  const int N = be.N();
  if (heads < 1 || !is_pow2(heads) || heads > N)
    throw ShapeMismatch("approx_softmax: heads must be a power of two dividing N");
  if (n_prime < 1) throw ShapeMismatch("approx_softmax: empty score range");
  const int gt = N / heads;
  const size_t want = static_cast<size_t>((n_prime + gt - 1) / gt);
  if (maps.size() != want)
    throw ShapeMismatch("approx_softmax: expected " + std::to_string(want) + " score maps, got " +
                        std::to_string(maps.size()));
  if (spec.scale_in <= 0.0 || spec.scale_in > 1.0)
    throw ShapeMismatch("approx_softmax: scale_in must lie in (0, 1]");
  check_budget(spec, softmax_depth(spec), "approx_softmax");

  // Masked scaled exponentials: exp(s - M) * scale_in on valid slots, exact
  // zeros elsewhere. The mask rides the polynomial coefficients through the
  // 2^r squarings, so the scale enters as its 2^r-th root.
  require_degrees(spec, 2, "approx_softmax");
  const double scale_root = std::pow(spec.scale_in, 1.0 / (1 << spec.degrees[1]));
  std::vector<Ciphertext> es;
  es.reserve(maps.size());
  for (size_t m = 0; m < maps.size(); ++m) {
    const int cnt = std::min<long long>(gt, n_prime - static_cast<long long>(m) * gt);
    SlotVector mask = SlotVector::Zero(N);
    for (int h = 0; h < heads; ++h)
      for (int k = 0; k < cnt; ++k) mask[h * gt + k] = scale_root;
    es.push_back(approx_exp(be, maps[m], spec, &mask));
  }

  // Per-head normalizer, replicated across each head block.
  Ciphertext sum = es[0];
  for (size_t m = 1; m < es.size(); ++m) sum = be.add(sum, es[m]);
  sum = fold_stride(be, sum, 1, gt);
  Ciphertext total = be.mul_plain(sum, stride_mask(N, gt, 0));
  total = replicate_block(be, total, 1, gt);

  ApproxSpec sub = gs_subspec(spec, 1e-9, 1.0, spec.iterations);
  Ciphertext inv = goldschmidt(be, total, GoldschmidtKind::Inverse, sub);

  std::vector<Ciphertext> probs;
  probs.reserve(es.size());
  for (const Ciphertext& e : es) probs.push_back(be.mul(e, inv));
  return probs;
}

Ciphertext approx_softmax(Backend& be, const Ciphertext& scores, int n_prime,
                          const ApproxSpec& spec) {
  return approx_softmax(be, std::vector<Ciphertext>{scores}, n_prime, 1, spec)[0];
}

// --- layer norm -----------------------------------------------------------------

int norm_depth(const ApproxSpec& spec) { return 5 + 2 * spec.iterations; }

Ciphertext approx_norm(Backend& be, const Ciphertext& x, const Vector& gamma, const Vector& beta,
                       double eps, const ApproxSpec& spec) {
  const Layout& ly = require_norm_layout(x, "approx_norm");
  const int N = be.N();
  const int d_log = static_cast<int>(gamma.size());
  if (beta.size() != gamma.size()) throw ShapeMismatch("approx_norm: gamma/beta size mismatch");
  if (d_log < 1 || d_log > ly.d)
    throw ShapeMismatch("approx_norm: logical width must fit the layout");
  check_budget(spec, norm_depth(spec), "approx_norm");

  // Mean, replicated over the logical positions of the stride class.
  Ciphertext s1 = fold_stride(be, x, ly.t, ly.d);
  Ciphertext mu = be.mul_plain(s1, logical_mask(ly, N, d_log, 1.0 / d_log));
  Ciphertext xc = be.sub(x, mu);

  // Biased variance, scaled into the Goldschmidt domain; off-class slots are
  // parked mid-domain so the guard sees in-domain values everywhere (their
  // garbage is wiped by the masked affine at the end).
  Ciphertext sq = be.mul(xc, xc);
  Ciphertext s2 = fold_stride(be, sq, ly.t, ly.d);
  Ciphertext vs = be.mul_plain(s2, logical_mask(ly, N, d_log, spec.scale_in / d_log));
  vs = be.add_plain(vs, logical_mask(ly, N, d_log, eps * spec.scale_in));
  SlotVector valid = logical_mask(ly, N, d_log, 1.0);
  vs = guard_domain(be, vs, spec, &valid, "approx_norm");
  const double mid = 0.5 * (spec.domain_lo + spec.domain_hi);
  vs = be.add_plain(vs, SlotVector((1.0 - valid) * mid));

  ApproxSpec sub = gs_subspec(spec, spec.domain_lo, spec.domain_hi, spec.iterations);
  sub.function = "rsqrt";
  vs.layout.reset();  // guarded here already; run the kernel slot-blind
  Ciphertext rs = goldschmidt(be, vs, GoldschmidtKind::Rsqrt, sub);

  Ciphertext y = be.mul(xc, rs);
  Ciphertext out = be.mul_plain(y, encode_logical(ly, N, gamma, std::sqrt(spec.scale_in)));
  out = be.add_plain(out, encode_logical(ly, N, beta, 1.0));
  out.layout = ly;
  return out;
}

// --- SiLU / GeLU -----------------------------------------------------------------

int silu_depth(const ApproxSpec& spec) {
  require_degrees(spec, 1, "silu_depth");
  return poly_depth(spec.degrees[0]);
}

Ciphertext approx_silu(Backend& be, const Ciphertext& x, const ApproxSpec& spec,
                       const SlotVector* extra_coeff) {
  validate_domain(spec, "approx_silu");
  require_degrees(spec, 1, "approx_silu");
  check_budget(spec, silu_depth(spec), "approx_silu");
  const bool gelu = spec.function == "gelu";

  SlotVector mask;
  const SlotVector* mask_ptr = nullptr;
  if (x.layout) {
    mask = make_mask(*x.layout, be.N(), MaskKind::ValidSlots);
    if (extra_coeff) mask *= *extra_coeff;
    mask_ptr = &mask;
  } else if (extra_coeff) {
    mask = *extra_coeff;
    mask_ptr = &mask;
  }

  Ciphertext xg = guard_domain(be, x, spec, mask_ptr, gelu ? "approx_gelu" : "approx_silu");
  std::vector<double> coeffs = fit_cheb_ls(gelu ? gelu_ref : silu_ref, spec.domain_lo,
                                           spec.domain_hi, spec.degrees[0]);
  if (spec.domain_lo < 0.0 && spec.domain_hi > 0.0) {
    // Pin the fixed point at zero so sparse slots stay (near-)sparse.
    const double z0 = (-spec.domain_lo - spec.domain_hi) / (spec.domain_hi - spec.domain_lo);
    double b1 = 0.0, b2 = 0.0;
    for (int k = static_cast<int>(coeffs.size()) - 1; k >= 1; --k) {
      const double t = 2.0 * z0 * b1 - b2 + coeffs[static_cast<size_t>(k)];
      b2 = b1;
      b1 = t;
    }
    coeffs[0] -= z0 * b1 - b2 + coeffs[0];
  }
  Ciphertext out = eval_cheb(be, xg, spec.domain_lo, spec.domain_hi, coeffs, mask_ptr);
  if (out.layout) out.layout->deferred_mask = false;
  return out;
}

// --- exact-mode oracles -----------------------------------------------------------

Ciphertext exact_apply(Backend& be, const Ciphertext& x, const std::function<double(double)>& f) {
  SlotVector mask =
      x.layout ? make_mask(*x.layout, be.N(), MaskKind::ValidSlots) : SlotVector::Ones(be.N());
  Ciphertext out = be.exact_transform(x, [f, mask](const SlotVector& s) {
    SlotVector o(s.size());
    for (int i = 0; i < s.size(); ++i) o[i] = mask[i] != 0.0 ? f(s[i]) : 0.0;
    return o;
  });
  if (out.layout) out.layout->deferred_mask = false;
  return out;
}

Ciphertext exact_silu(Backend& be, const Ciphertext& x) { return exact_apply(be, x, silu_ref); }

Ciphertext exact_gelu(Backend& be, const Ciphertext& x) { return exact_apply(be, x, gelu_ref); }

Ciphertext exact_norm(Backend& be, const Ciphertext& x, const Vector& gamma, const Vector& beta,
                      double eps) {
  const Layout& ly = require_norm_layout(x, "exact_norm");
  const int d_log = static_cast<int>(gamma.size());
  if (beta.size() != gamma.size()) throw ShapeMismatch("exact_norm: gamma/beta size mismatch");
  if (d_log < 1 || d_log > ly.d) throw ShapeMismatch("exact_norm: logical width must fit layout");
  const Layout cap = ly;
  const int N = be.N();
  Vector g = gamma, b = beta;
  return be.exact_transform(x, [cap, g, b, eps, d_log, N](const SlotVector& s) {
    double mean = 0.0;
    for (int e = 0; e < d_log; ++e) mean += s[(static_cast<long long>(e) * cap.t + cap.offset) % N];
    mean /= d_log;
    double var = 0.0;
    for (int e = 0; e < d_log; ++e) {
      const double v = s[(static_cast<long long>(e) * cap.t + cap.offset) % N] - mean;
      var += v * v;
    }
    var /= d_log;
    const double inv = 1.0 / std::sqrt(var + eps);
    SlotVector out = SlotVector::Zero(s.size());
    for (int e = 0; e < d_log; ++e) {
      const long long slot = (static_cast<long long>(e) * cap.t + cap.offset) % N;
      out[slot] = (s[slot] - mean) * inv * g[e] + b[e];
    }
    return out;
  });
}

// --- sub-layer traces ---------------------------------------------------------------

int SubLayerTrace::total_depth() const {
  int d = 0;
  for (const SubLayerPhase& p : phases) d += p.depth;
  return d;
}

SubLayerTrace sublayer_trace(const std::string& function, const ApproxSpec& spec) {
  if (spec.exact) return {};
  SubLayerTrace tr;
  if (function == "softmax") {
    tr.phases.push_back({"exponential", exp_depth(spec), 2, false});
    tr.phases.push_back({"normalizer", 1, 2, true});
    tr.phases.push_back({"reciprocal", spec.iterations, 2, false});
    tr.phases.push_back({"renormalize", 1, 2, true});
  } else if (function == "norm") {
    tr.phases.push_back({"center", 1, 1, true});
    tr.phases.push_back({"variance", 2, 2, false});
    tr.phases.push_back({"inverse sqrt", 2 * spec.iterations, 3, false});
    tr.phases.push_back({"rescale", 2, 2, true});
  } else if (function == "silu" || function == "gelu") {
    tr.phases.push_back({"composite polynomial", silu_depth(spec), 2, false});
  } else if (function == "exp") {
    tr.phases.push_back({"shift", 1, 1, true});
    tr.phases.push_back({"polynomial", poly_depth(spec.degrees.at(0)) - 1, 2, false});
    for (int i = 0; i < spec.degrees.at(1); ++i) tr.phases.push_back({"squaring", 1, 1, true});
  } else if (function == "inverse") {
    tr.phases.push_back({"reciprocal", goldschmidt_depth(GoldschmidtKind::Inverse, spec), 2, false});
  } else if (function == "rsqrt") {
    tr.phases.push_back({"inverse sqrt", goldschmidt_depth(GoldschmidtKind::Rsqrt, spec), 2, false});
  } else {
    throw ShapeMismatch("sublayer_trace: unknown function '" + function + "'");
  }
  return tr;
}

}  // namespace slotforge
