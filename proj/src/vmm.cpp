#include "slotforge/vmm.hpp"

#include <cmath>
#include <vector>

namespace slotforge {

namespace {

int ceil_sqrt(long long k) {
  int b = static_cast<int>(std::sqrt(static_cast<double>(k)));
  while (static_cast<long long>(b) * b < k) ++b;
  while (b > 1 && static_cast<long long>(b - 1) * (b - 1) >= k) --b;
  return b;
}

Scalar weight_at(const WeightView& w, int r, int c) {
  return (r < w.rows() && c < w.cols()) ? w.at(r, c) : 0.0;
}

}  // namespace

BsgsSplit bsgs_split(long long k) {
  if (k < 1) throw ShapeMismatch("bsgs_split: k must be >= 1");
  const int b = ceil_sqrt(k);
  const int g = static_cast<int>((k + b - 1) / b);
  return {b, g};
}

Ciphertext inner_rotate(Backend& be, const Ciphertext& x, int r, int block, RotationHint hint) {
  const int N = be.N();
  if (block <= 0 || N % block != 0) throw ShapeMismatch("inner_rotate: block must divide N");
  const int s = static_cast<int>(pos_mod(r, block));
  if (s == 0) return x;
  // keep part: slots with i % block < block - s come from a plain left shift;
  // the top s slots of each block wrap around via a shift of s - block.
  SlotVector keep = SlotVector::Zero(N);
  SlotVector wrap = SlotVector::Zero(N);
  for (int i = 0; i < N; ++i) ((i % block < block - s) ? keep : wrap)[i] = 1.0;
  Ciphertext lo = be.mul_plain(be.rotate(x, s, hint), keep);
  Ciphertext hi = be.mul_plain(be.rotate(x, s - block, hint), wrap);
  return be.add(lo, hi);
}

SlotVector valid_mask(const Layout& ly, int N) {
  validate_layout(ly, N);
  switch (ly.kind) {
    case LayoutKind::Interleaved:
      return stride_mask(N, ly.t, ly.offset);
    case LayoutKind::Contiguous:
      return block_mask(N, 0, ly.d);
    case LayoutKind::Replicated:
      return SlotVector::Ones(N);
  }
  return SlotVector::Ones(N);
}

Ciphertext apply_deferred_mask(Backend& be, const Ciphertext& x) {
  if (!x.layout || !x.layout->deferred_mask) return x;
  Ciphertext out = be.mul_plain(x, valid_mask(*x.layout, be.N()));
  out.layout = x.layout;
  out.layout->deferred_mask = false;
  return out;
}

std::array<SlotVector, 3> rope_plaintexts(const RoPEParams& p, const Layout& ly, int N) {
  validate_layout(ly, N);
  if (ly.kind != LayoutKind::Interleaved) throw LayoutMismatch("rope_plaintexts: interleaved layout required");
  if (p.d_head <= 0 || p.d_head % 2 != 0) throw ShapeMismatch("rope_plaintexts: d_head must be positive and even");
  SlotVector p0 = SlotVector::Zero(N), p1 = SlotVector::Zero(N), p2 = SlotVector::Zero(N);
  for (int e = 0; e < ly.d; ++e) {
    const int pair = (e % p.d_head) / 2;
    const double angle =
        static_cast<double>(p.n) * std::pow(p.base, -2.0 * pair / static_cast<double>(p.d_head));
    const int i = e * ly.t + ly.offset;
    p0[i] = std::cos(angle);
    if (e % 2 == 0)
      p1[i] = std::sin(angle);
    else
      p2[i] = -std::sin(angle);
  }
  return {p0, p1, p2};
}

Ciphertext fused_extract(Backend& be, const Ciphertext& x, Successor succ, const RoPEParams* rope,
                         const SlotVector* coeff) {
  const int N = be.N();
  if (!x.layout) throw LayoutMismatch("fused_extract: input must carry a layout");
  const Layout ly = *x.layout;

  if (succ == Successor::Rope) {
    if (!rope) throw ShapeMismatch("fused_extract: rope successor needs RoPEParams");
    auto [p0, p1, p2] = rope_plaintexts(*rope, ly, N);
    const int s = rope->s;
    Ciphertext y = be.mul_plain(x, p0);
    y = be.add(y, be.rotate(be.mul_plain(x, p1), -s));
    y = be.add(y, be.rotate(be.mul_plain(x, p2), s));
    y.layout = ly;
    y.layout->deferred_mask = false;
    return y;
  }

  SlotVector m = valid_mask(ly, N);
  if (coeff) m *= *coeff;
  Ciphertext y = be.mul_plain(x, m);
  y.layout = ly;
  y.layout->deferred_mask = false;
  return y;
}

// ---------------------------------------------------------------------------
// Interleaved packing.
//
// Preprocess builds the staircase with a doubling ladder of log2(t_in)
// rotations; group alignment is a plain slot rotation by g*t_in*t_out (the
// staircase is fully cyclic, so no masks are ever needed); reduce folds each
// output window of t_out slots onto the slot selected by the offset bits.
// Input/output offsets are absorbed into the diagonal plaintexts and the fold
// directions, so they cost nothing.
// ---------------------------------------------------------------------------

namespace {

struct InterleavedShape {
  int d_in, d_out, t_in, t_out;
  long long k;
  int alpha_up;   // fine-step multiplier for the staircase readout
  int ladder_T;   // max(t_in, t_out): ladder step unit
  int tau_in, tau_out;
  int tau_u;      // window origin of the output partition
  int carry;      // column relabel when the fold lands past the window origin
  int delta;      // fold landing offset within the window
};

InterleavedShape interleaved_shape(int N, const WeightView& w, int tau_in, int tau_out) {
  InterleavedShape s;
  s.d_in = padded_dim(w.rows());
  s.d_out = padded_dim(w.cols());
  if (s.d_in > N || s.d_out > N) throw ShapeMismatch("vmm_interleaved: padded dimension exceeds N");
  s.t_in = N / s.d_in;
  s.t_out = N / s.d_out;
  s.k = std::max<long long>(static_cast<long long>(s.d_in) * s.d_out / N, 1);
  s.alpha_up = std::max(1, s.t_out / s.t_in);
  s.ladder_T = std::max(s.t_in, s.t_out);
  if (tau_in < 0 || tau_in >= s.t_in) throw ShapeMismatch("vmm_interleaved: input offset out of range");
  if (tau_out < 0 || tau_out >= s.t_out) throw ShapeMismatch("vmm_interleaved: output offset out of range");
  s.tau_in = tau_in;
  s.tau_out = tau_out;
  s.tau_u = tau_in % s.t_out;
  s.carry = tau_out < s.tau_u ? 1 : 0;
  s.delta = static_cast<int>(pos_mod(tau_out - s.tau_u, s.t_out));
  return s;
}

// Value of the group-g diagonal plaintext at slot j of the pre-giant-step
// frame. The staircase readout at j after the group rotation is x[row], and j
// sits in the window of output column col; the jj guard kills the duplicate
// coverage that appears when a single group spans more than d_in diagonals.
Scalar interleaved_diag(const InterleavedShape& s, const WeightView& w, int N, long long g, long long j) {
  const long long i0 = pos_mod(j + g * s.t_in * s.t_out - s.tau_in, N);
  const int row = static_cast<int>((i0 / s.t_in + (i0 % s.t_in) * s.alpha_up) % s.d_in);
  const long long rel = pos_mod(j - s.tau_u, N);
  const long long u = rel % s.t_out;
  const long long within = u / s.t_in + (u % s.t_in) * s.alpha_up;
  if (g * s.t_out + within >= s.d_in) return 0.0;
  const int col = static_cast<int>((rel / s.t_out + s.carry) % s.d_out);
  return weight_at(w, row, col);
}

SlotVector interleaved_plain(const InterleavedShape& s, const WeightView& w, int N, long long g,
                             long long giant_shift) {
  SlotVector p(N);
  for (int i = 0; i < N; ++i) p[i] = interleaved_diag(s, w, N, g, pos_mod(i - giant_shift, N));
  return p;
}

}  // namespace

Ciphertext vmm_interleaved(Backend& be, const Ciphertext& x, const WeightView& w, const VmmOptions& opts) {
  const int N = be.N();
  if (!x.layout || x.layout->kind != LayoutKind::Interleaved)
    throw LayoutMismatch("vmm_interleaved: input must carry an interleaved layout");
  if (x.layout->deferred_mask)
    throw LayoutMismatch("vmm_interleaved: mask (or fuse) deferred garbage before feeding a VMM");
  const InterleavedShape s = interleaved_shape(N, w, x.layout->offset, opts.out_offset);
  if (x.layout->d != s.d_in)
    throw ShapeMismatch("vmm_interleaved: layout d=" + std::to_string(x.layout->d) + " but weights want " +
                        std::to_string(s.d_in));

  // 1. preprocess ladder
  Ciphertext stair = x;
  for (int step = 1; step < s.t_in; step <<= 1)
    stair = be.add(stair, be.rotate(stair, step * (s.ladder_T - 1)));

  // 2. multiply-accumulate over the k diagonal groups
  Ciphertext acc;
  if (!opts.bsgs) {
    for (long long g = 0; g < s.k; ++g) {
      Ciphertext xg = be.rotate(stair, static_cast<int>(g * s.t_in * s.t_out));
      Ciphertext term = be.mul_plain(xg, interleaved_plain(s, w, N, g, 0));
      acc = (g == 0) ? std::move(term) : be.add(acc, term);
    }
  } else {
    const auto [b, giants] = bsgs_split(s.k);
    std::vector<Ciphertext> baby;
    baby.reserve(b);
    baby.push_back(stair);
    for (int g1 = 1; g1 < b; ++g1)
      baby.push_back(be.rotate(stair, g1 * s.t_in * s.t_out, {.hoisted = true}));
    for (int g2 = 0; g2 < giants; ++g2) {
      const long long shift = static_cast<long long>(g2) * b * s.t_in * s.t_out;
      Ciphertext partial;
      bool got = false;
      for (int g1 = 0; g1 < b; ++g1) {
        const long long g = static_cast<long long>(g2) * b + g1;
        if (g >= s.k) break;
        Ciphertext term = be.mul_plain(baby[g1], interleaved_plain(s, w, N, g, shift));
        partial = got ? be.add(partial, term) : std::move(term);
        got = true;
      }
      Ciphertext aligned = be.rotate(partial, static_cast<int>(shift));
      acc = (g2 == 0) ? std::move(aligned) : be.add(acc, aligned);
    }
  }

  // 3. reduce: fold each window of t_out slots onto window start + delta
  for (int m = 0; (1 << m) < s.t_out; ++m) {
    const int step = 1 << m;
    acc = be.add(acc, be.rotate(acc, ((s.delta >> m) & 1) ? -step : step));
  }

  // 4. mask useless slots, or defer it to the next elementwise multiplication
  if (opts.mask_output) acc = be.mul_plain(acc, stride_mask(N, s.t_out, s.tau_out));
  acc.layout = Layout{LayoutKind::Interleaved, s.d_out, s.t_out, s.tau_out, 1, !opts.mask_output};
  return acc;
}

// ---------------------------------------------------------------------------
// Direct packing baseline: the classic diagonal method on a contiguous
// vector, with inner rotations standing in for the cyclic shifts the layout
// cannot give for free. BSGS fuses the giant-step inner-rotation masks into
// pre-rotated diagonals, so the depth stays at 2.
// ---------------------------------------------------------------------------

Ciphertext vmm_direct(Backend& be, const Ciphertext& x, const WeightView& w, bool bsgs) {
  const int N = be.N();
  if (!x.layout || x.layout->kind != LayoutKind::Contiguous)
    throw LayoutMismatch("vmm_direct: input must carry a contiguous layout");
  const int d = padded_dim(w.rows());
  if (padded_dim(w.cols()) != d) throw ShapeMismatch("vmm_direct: square weights only");
  if (x.layout->d != d) throw ShapeMismatch("vmm_direct: layout/weight dimension mismatch");

  Ciphertext acc;
  bool first = true;
  if (!bsgs) {
    for (int j = 0; j < d; ++j) {
      SlotVector p = SlotVector::Zero(N);
      for (int i = 0; i < d; ++i) p[i] = weight_at(w, (i + j) % d, i);
      Ciphertext term = be.mul_plain(inner_rotate(be, x, j, d), p);
      acc = first ? std::move(term) : be.add(acc, term);
      first = false;
    }
    acc.layout = Layout{LayoutKind::Contiguous, d, N / d, 0, 1, false};
    return acc;
  }

  const auto [b, giants] = bsgs_split(d);
  std::vector<Ciphertext> baby;
  baby.reserve(b);
  baby.push_back(x);
  for (int g1 = 1; g1 < b; ++g1) baby.push_back(inner_rotate(be, x, g1, d, {.hoisted = true}));
  for (int g2 = 0; g2 < giants; ++g2) {
    const int r = g2 * b;  // giant-step inner-rotation amount, < d
    // The giant step's inner rotation is realized as two global rotations with
    // its masks folded into the pre-rotated diagonals: output columns [0, d-r)
    // read through Rot(+r), columns [d-r, d) wrap through Rot(r-d).
    Ciphertext keep_sum, wrap_sum;
    bool have_keep = false, have_wrap = false;
    for (int g1 = 0; g1 < b; ++g1) {
      const int j = g2 * b + g1;
      if (j >= d) break;
      {
        SlotVector p = SlotVector::Zero(N);
        for (int i = r; i < d; ++i) p[i] = weight_at(w, (i + g1) % d, i - r);
        Ciphertext term = be.mul_plain(baby[g1], p);
        keep_sum = have_keep ? be.add(keep_sum, term) : std::move(term);
        have_keep = true;
      }
      if (r > 0) {
        SlotVector p = SlotVector::Zero(N);
        for (int i = 0; i < r; ++i) p[i] = weight_at(w, (i + g1) % d, i + d - r);
        Ciphertext term = be.mul_plain(baby[g1], p);
        wrap_sum = have_wrap ? be.add(wrap_sum, term) : std::move(term);
        have_wrap = true;
      }
    }
    Ciphertext aligned = be.rotate(keep_sum, r);
    if (have_wrap) aligned = be.add(aligned, be.rotate(wrap_sum, r - d));
    acc = first ? std::move(aligned) : be.add(acc, aligned);
    first = false;
  }
  // the global giant rotations drag stray content into the tail slots
  acc.layout = Layout{LayoutKind::Contiguous, d, N / d, 0, 1, true};
  return acc;
}

// ---------------------------------------------------------------------------
// Replicated packing baseline: whole-vector copies staggered per copy and
// aligned per diagonal group, both through generic inner rotations (which is
// what makes the baseline 3 levels deep), then a copy fold.
// ---------------------------------------------------------------------------

Ciphertext vmm_replicated(Backend& be, const Ciphertext& x, const WeightView& w, bool bsgs) {
  const int N = be.N();
  if (!x.layout || x.layout->kind != LayoutKind::Replicated)
    throw LayoutMismatch("vmm_replicated: input must carry a replicated layout");
  const int d = padded_dim(w.rows());
  if (padded_dim(w.cols()) != d) throw ShapeMismatch("vmm_replicated: square weights only");
  if (x.layout->d != d) throw ShapeMismatch("vmm_replicated: layout/weight dimension mismatch");
  const int t = N / d;
  const long long k = std::max<long long>(static_cast<long long>(d) * d / N, 1);
  const int copies = std::min(t, d);  // copies beyond d would pair with all-zero diagonals

  // 1. stagger: copy c holds the vector inner-rotated by c. The copies happen
  // to be d-periodic so both halves carry identical content, but the baseline
  // is accounted generically: 2 rotations + 2 masks per staggered copy.
  Ciphertext stair;
  for (int c = 0; c < copies; ++c) {
    SlotVector keep = SlotVector::Zero(N);
    SlotVector wrap = SlotVector::Zero(N);
    for (int i = c * d; i < (c + 1) * d; ++i) ((i % d < d - c) ? keep : wrap)[i] = 1.0;
    Ciphertext part = be.mul_plain(be.rotate(x, c), keep);
    if (c > 0) part = be.add(part, be.mul_plain(be.rotate(x, c - d), wrap));
    stair = (c == 0) ? std::move(part) : be.add(stair, part);
  }

  // copy c of group g pairs with diagonal index g*t + c
  auto group_plain = [&](long long g) {
    SlotVector p = SlotVector::Zero(N);
    for (int c = 0; c < copies; ++c) {
      const long long j = g * t + c;
      if (j >= d) continue;
      for (int i = 0; i < d; ++i) p[c * d + i] = weight_at(w, static_cast<int>((i + j) % d), i);
    }
    return p;
  };

  // 2. multiply-accumulate: align the staircase with group g's diagonals by an
  // inner rotation of g*t within every copy.
  Ciphertext acc;
  bool first = true;
  if (!bsgs) {
    for (long long g = 0; g < k; ++g) {
      Ciphertext xg = inner_rotate(be, stair, static_cast<int>((g * t) % d), d);
      Ciphertext term = be.mul_plain(xg, group_plain(g));
      acc = first ? std::move(term) : be.add(acc, term);
      first = false;
    }
  } else {
    const auto [b, giants] = bsgs_split(k);
    std::vector<Ciphertext> baby;
    baby.reserve(b);
    baby.push_back(stair);
    for (int g1 = 1; g1 < b; ++g1)
      baby.push_back(inner_rotate(be, stair, static_cast<int>((static_cast<long long>(g1) * t) % d), d,
                                  {.hoisted = true}));
    for (int g2 = 0; g2 < giants; ++g2) {
      const int r = static_cast<int>((static_cast<long long>(g2) * b * t) % d);
      // giant-step inner rotation with its masks folded into the diagonals:
      // within each copy, output slots [0, d-r) read through Rot(+r) and
      // slots [d-r, d) wrap through Rot(r-d).
      Ciphertext keep_sum, wrap_sum;
      bool have_keep = false, have_wrap = false;
      for (int g1 = 0; g1 < b; ++g1) {
        const long long g = static_cast<long long>(g2) * b + g1;
        if (g >= k) break;
        SlotVector pk = SlotVector::Zero(N);
        SlotVector pw = SlotVector::Zero(N);
        for (int c = 0; c < copies; ++c) {
          const long long j = g * t + c;
          if (j >= d) continue;
          for (int i = 0; i < d; ++i) {
            const Scalar wv = weight_at(w, static_cast<int>((i + j) % d), i);
            if (i < d - r)
              pk[c * d + i + r] = wv;
            else
              pw[c * d + i + r - d] = wv;
          }
        }
        Ciphertext tk = be.mul_plain(baby[g1], pk);
        keep_sum = have_keep ? be.add(keep_sum, tk) : std::move(tk);
        have_keep = true;
        if (r > 0) {
          Ciphertext tw = be.mul_plain(baby[g1], pw);
          wrap_sum = have_wrap ? be.add(wrap_sum, tw) : std::move(tw);
          have_wrap = true;
        }
      }
      Ciphertext aligned = be.rotate(keep_sum, r);
      if (have_wrap) aligned = be.add(aligned, be.rotate(wrap_sum, r - d));
      acc = first ? std::move(aligned) : be.add(acc, aligned);
      first = false;
    }
  }

  // 3. fold the copies down onto copy 0
  for (int step = 1; step < t; step <<= 1) acc = be.add(acc, be.rotate(acc, step * d));
  acc.layout = Layout{LayoutKind::Contiguous, d, t, 0, 1, t > 1};
  return acc;
}

// ---------------------------------------------------------------------------
// Token-batched square VMM: the staircase is unnecessary (every slot is data)
// and every alignment is a stride multiple, so the token axis rides along.
// ---------------------------------------------------------------------------

Ciphertext vmm_batch(Backend& be, const Ciphertext& x, const WeightView& w, bool bsgs) {
  const int N = be.N();
  if (!x.layout || x.layout->kind != LayoutKind::Interleaved)
    throw LayoutMismatch("vmm_batch: input must carry an interleaved layout");
  if (x.layout->deferred_mask) throw LayoutMismatch("vmm_batch: input garbage must be cleared first");
  const int d = padded_dim(w.rows());
  if (padded_dim(w.cols()) != d) throw ShapeMismatch("vmm_batch: square weights only");
  if (x.layout->d != d) throw ShapeMismatch("vmm_batch: layout/weight dimension mismatch");
  const int t = N / d;

  auto plain = [&](int j, long long pre) {
    SlotVector p(N);
    for (int i = 0; i < N; ++i) {
      const int e = static_cast<int>(pos_mod(i - pre, N)) / t;
      p[i] = weight_at(w, (e + j) % d, e);
    }
    return p;
  };

  Ciphertext acc;
  bool first = true;
  if (!bsgs) {
    for (int j = 0; j < d; ++j) {
      Ciphertext term = be.mul_plain(be.rotate(x, j * t), plain(j, 0));
      acc = first ? std::move(term) : be.add(acc, term);
      first = false;
    }
  } else {
    const auto [b, giants] = bsgs_split(d);
    std::vector<Ciphertext> baby;
    baby.reserve(b);
    baby.push_back(x);
    for (int g1 = 1; g1 < b; ++g1) baby.push_back(be.rotate(x, g1 * t, {.hoisted = true}));
    for (int g2 = 0; g2 < giants; ++g2) {
      const long long shift = static_cast<long long>(g2) * b * t;
      Ciphertext partial;
      bool got = false;
      for (int g1 = 0; g1 < b; ++g1) {
        const int j = g2 * b + g1;
        if (j >= d) break;
        Ciphertext term = be.mul_plain(baby[g1], plain(j, shift));
        partial = got ? be.add(partial, term) : std::move(term);
        got = true;
      }
      Ciphertext aligned = be.rotate(partial, static_cast<int>(shift));
      acc = (g2 == 0) ? std::move(aligned) : be.add(acc, aligned);
    }
  }
  acc.layout = Layout{LayoutKind::Interleaved, d, t, 0, 1, false};
  return acc;
}

// ---------------------------------------------------------------------------
// Closed-form costs.
// ---------------------------------------------------------------------------

VmmCost predict_interleaved_cost(const EngineParams& p, int rows, int cols, const VmmOptions& opts) {
  const int d_in = padded_dim(rows), d_out = padded_dim(cols);
  const int t_in = p.N / d_in, t_out = p.N / d_out;
  const long long k = std::max<long long>(static_cast<long long>(d_in) * d_out / p.N, 1);
  VmmCost c;
  c.rotations = log2_exact(t_in) + log2_exact(t_out);
  if (opts.bsgs) {
    const auto [b, g] = bsgs_split(k);
    c.rotations += (b - 1) + (g - 1);
  } else {
    c.rotations += k - 1;
  }
  c.ct_pt_mults = k + (opts.mask_output ? 1 : 0);
  c.depth = 1 + (opts.mask_output ? 1 : 0);
  return c;
}

VmmCost predict_direct_cost(const EngineParams& p, int d, bool bsgs) {
  (void)p;
  d = padded_dim(d);
  VmmCost c;
  c.depth = 2;
  if (!bsgs) {
    c.rotations = 2LL * (d - 1);
    c.ct_pt_mults = 2LL * (d - 1) + d;
    return c;
  }
  const auto [b, g] = bsgs_split(d);
  c.rotations = 2LL * (b - 1) + 2LL * (g - 1);
  // babies carry 2 masks each; the g2 = 0 giant step uses one diagonal per
  // pair, later steps two (keep + wrap)
  c.ct_pt_mults = 2LL * (b - 1) + b + 2LL * (d - b);
  return c;
}

VmmCost predict_replicated_cost(const EngineParams& p, int d, bool bsgs) {
  d = padded_dim(d);
  const int t = p.N / d;
  const long long k = std::max<long long>(static_cast<long long>(d) * d / p.N, 1);
  const int copies = std::min(t, d);
  VmmCost c;
  c.depth = (k == 1) ? 2 : 3;  // a single diagonal group needs no alignment level
  c.rotations = 2LL * (copies - 1) + log2_exact(t);
  const long long stagger_mults = 2LL * (copies - 1) + 1;
  if (!bsgs) {
    c.rotations += 2LL * (k - 1);
    c.ct_pt_mults = stagger_mults + 2LL * (k - 1) + k;
    return c;
  }
  const auto [b, g] = bsgs_split(k);
  c.rotations += 2LL * (b - 1) + 2LL * (g - 1);
  c.ct_pt_mults = stagger_mults + 2LL * (b - 1) + b + 2LL * (k - b);
  return c;
}

VmmCost predict_batch_cost(const EngineParams& p, int d, bool bsgs) {
  (void)p;
  d = padded_dim(d);
  VmmCost c;
  c.depth = 1;
  c.ct_pt_mults = d;
  if (!bsgs) {
    c.rotations = d - 1;
  } else {
    const auto [b, g] = bsgs_split(d);
    c.rotations = (b - 1) + (g - 1);
  }
  return c;
}

}  // namespace slotforge
