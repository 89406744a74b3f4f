#pragma once

#include "slotforge/types.hpp"

#include <filesystem>
#include <string>

namespace slotforge {

// How a logical vector of d elements occupies the N slots of a ciphertext.
//
//   Contiguous:  element e at slot e (slots [d, N) unused).
//   Replicated:  the whole vector tiled t times: element e at slots c*d + e
//                for every copy c in [0, t).
//   Interleaved: element e at slot e*t + offset; the other slots of each
//                stride window hold zeros or, when deferred_mask is set,
//                unmasked garbage that a later multiplication must clear.
//
// d and t are powers of two with d*t == N (contiguous uses t = N/d too, so the
// invariant is uniform). heads tags multi-head packings where element blocks
// of size d/heads belong to distinct heads.
enum class LayoutKind { Contiguous, Replicated, Interleaved };

struct Layout {
  LayoutKind kind = LayoutKind::Interleaved;
  int d = 0;
  int t = 0;
  int offset = 0;
  int heads = 1;
  bool deferred_mask = false;

  bool operator==(const Layout&) const = default;
};

std::string to_string(LayoutKind kind);
std::string to_string(const Layout& ly);

Layout make_contiguous(int d, int N);
Layout make_replicated(int d, int N);
Layout make_interleaved(int d, int N, int offset = 0, int heads = 1);

// Validates the layout against N (powers of two, d*t == N, offset < t).
void validate_layout(const Layout& ly, int N);

// Encodes x (logical length <= d; shorter inputs are zero-padded) into N slots.
SlotVector encode(const Vector& x, const Layout& ly, int N);

// Reads the d logical elements back out of a slot vector.
Vector decode(const SlotVector& slots, const Layout& ly);

// 1.0 at slots with i % t == offset, else 0.
SlotVector stride_mask(int N, int t, int offset);

// 1.0 at slots [begin, begin+len), else 0 (no wraparound).
SlotVector block_mask(int N, int begin, int len);

// The binary masks the packing protocols need.
//
//   ValidSlots:       the slots the layout declares as data.
//   ReplicateExtract: the first t slots of every head block (keeps one copy of
//                     a t-fold replicated per-head map, e.g. [1,1,0,0,0,0,0,0]
//                     for N=8, t=2, one head).
//   CacheSlot:        stride positions of a single token column: i % t == offset
//                     (`offset` argument, not the layout's own).
enum class MaskKind { ValidSlots, ReplicateExtract, CacheSlot };

SlotVector make_mask(const Layout& ly, int N, MaskKind kind, int offset = 0);

// Smallest power of two >= d (logical dims like 768 pad to 1024).
int padded_dim(int d);

// Zero-pads x to length d.
Vector pad_to(const Vector& x, int d);

// Weight file pair: <name>.bin holds row-major little-endian float64, and the
// <name>.json sidecar records {"name", "rows", "cols"}.
void save_weight(const std::filesystem::path& dir, const std::string& name, const Matrix& w);
Matrix load_weight(const std::filesystem::path& dir, const std::string& name);

}  // namespace slotforge
