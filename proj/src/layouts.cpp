#include "slotforge/layouts.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>

namespace slotforge {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeMismatch(msg);
}

}  // namespace

std::string to_string(LayoutKind kind) {
  switch (kind) {
    case LayoutKind::Contiguous:
      return "contiguous";
    case LayoutKind::Replicated:
      return "replicated";
    case LayoutKind::Interleaved:
      return "interleaved";
  }
  return "?";
}

std::string to_string(const Layout& ly) {
  std::string s = to_string(ly.kind) + "(d=" + std::to_string(ly.d) + ",t=" + std::to_string(ly.t) +
                  ",offset=" + std::to_string(ly.offset);
  if (ly.heads != 1) s += ",heads=" + std::to_string(ly.heads);
  if (ly.deferred_mask) s += ",deferred_mask";
  return s + ")";
}

Layout make_contiguous(int d, int N) {
  Layout ly{LayoutKind::Contiguous, d, N / d, 0, 1, false};
  validate_layout(ly, N);
  return ly;
}

Layout make_replicated(int d, int N) {
  Layout ly{LayoutKind::Replicated, d, N / d, 0, 1, false};
  validate_layout(ly, N);
  return ly;
}

Layout make_interleaved(int d, int N, int offset, int heads) {
  Layout ly{LayoutKind::Interleaved, d, N / d, offset, heads, false};
  validate_layout(ly, N);
  return ly;
}

void validate_layout(const Layout& ly, int N) {
  require(is_pow2(N), "layout: N must be a power of two");
  require(ly.d > 0 && is_pow2(ly.d), "layout: d must be a positive power of two, got " + std::to_string(ly.d));
  require(ly.t > 0 && is_pow2(ly.t), "layout: t must be a positive power of two, got " + std::to_string(ly.t));
  require(static_cast<long long>(ly.d) * ly.t == N, "layout: d*t must equal N in " + to_string(ly));
  require(ly.offset >= 0 && ly.offset < ly.t, "layout: offset out of range in " + to_string(ly));
  require(ly.heads >= 1 && is_pow2(ly.heads) && ly.heads <= ly.d,
          "layout: heads must be a power of two dividing d in " + to_string(ly));
}

SlotVector encode(const Vector& x, const Layout& ly, int N) {
  validate_layout(ly, N);
  require(x.size() <= ly.d, "encode: input length " + std::to_string(x.size()) + " exceeds d in " + to_string(ly));
  SlotVector slots = SlotVector::Zero(N);
  for (int e = 0; e < static_cast<int>(x.size()); ++e) {
    switch (ly.kind) {
      case LayoutKind::Contiguous:
        slots[e] = x[e];
        break;
      case LayoutKind::Replicated:
        for (int c = 0; c < ly.t; ++c) slots[c * ly.d + e] = x[e];
        break;
      case LayoutKind::Interleaved:
        slots[e * ly.t + ly.offset] = x[e];
        break;
    }
  }
  return slots;
}

Vector decode(const SlotVector& slots, const Layout& ly) {
  const int N = static_cast<int>(slots.size());
  validate_layout(ly, N);
  Vector x(ly.d);
  for (int e = 0; e < ly.d; ++e) {
    switch (ly.kind) {
      case LayoutKind::Contiguous:
        x[e] = slots[e];
        break;
      case LayoutKind::Replicated:
        x[e] = slots[e];
        break;
      case LayoutKind::Interleaved:
        x[e] = slots[e * ly.t + ly.offset];
        break;
    }
  }
  return x;
}

SlotVector stride_mask(int N, int t, int offset) {
  require(is_pow2(N) && is_pow2(t) && t <= N, "stride_mask: bad N/t");
  require(offset >= 0 && offset < t, "stride_mask: offset out of range");
  SlotVector m = SlotVector::Zero(N);
  for (int i = offset; i < N; i += t) m[i] = 1.0;
  return m;
}

SlotVector block_mask(int N, int begin, int len) {
  require(begin >= 0 && len >= 0 && begin + len <= N, "block_mask: range out of bounds");
  SlotVector m = SlotVector::Zero(N);
  m.segment(begin, len) = 1.0;
  return m;
}

SlotVector make_mask(const Layout& ly, int N, MaskKind kind, int offset) {
  validate_layout(ly, N);
  switch (kind) {
    case MaskKind::ValidSlots:
      switch (ly.kind) {
        case LayoutKind::Interleaved:
          return stride_mask(N, ly.t, ly.offset);
        case LayoutKind::Contiguous:
          return block_mask(N, 0, ly.d);
        case LayoutKind::Replicated:
          return SlotVector::Ones(N);
      }
      break;
    case MaskKind::ReplicateExtract: {
      const int head_block = N / ly.heads;
      SlotVector m = SlotVector::Zero(N);
      for (int h = 0; h < ly.heads; ++h) m.segment(h * head_block, ly.t) = 1.0;
      return m;
    }
    case MaskKind::CacheSlot:
      return stride_mask(N, ly.t, offset);
  }
  throw Error("make_mask: unknown kind");
}

int padded_dim(int d) {
  require(d > 0, "padded_dim: d must be positive");
  return static_cast<int>(next_pow2(d));
}

Vector pad_to(const Vector& x, int d) {
  require(x.size() <= d, "pad_to: input longer than target");
  Vector out = Vector::Zero(d);
  out.head(x.size()) = x;
  return out;
}

void save_weight(const std::filesystem::path& dir, const std::string& name, const Matrix& w) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream bin(dir / (name + ".bin"), std::ios::binary);
    if (!bin) throw Error("save_weight: cannot open " + (dir / (name + ".bin")).string());
    bin.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(sizeof(double) * w.size()));
  }
  nlohmann::json meta{{"name", name}, {"rows", w.rows()}, {"cols", w.cols()}};
  std::ofstream js(dir / (name + ".json"));
  if (!js) throw Error("save_weight: cannot open " + (dir / (name + ".json")).string());
  js << meta.dump(2) << "\n";
}

Matrix load_weight(const std::filesystem::path& dir, const std::string& name) {
  std::ifstream js(dir / (name + ".json"));
  if (!js) throw Error("load_weight: missing sidecar " + (dir / (name + ".json")).string());
  nlohmann::json meta = nlohmann::json::parse(js);
  const auto rows = meta.at("rows").get<std::int64_t>();
  const auto cols = meta.at("cols").get<std::int64_t>();
  Matrix w(rows, cols);
  std::ifstream bin(dir / (name + ".bin"), std::ios::binary);
  if (!bin) throw Error("load_weight: missing data " + (dir / (name + ".bin")).string());
  bin.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(sizeof(double) * w.size()));
  if (bin.gcount() != static_cast<std::streamsize>(sizeof(double) * w.size()))
    throw Error("load_weight: truncated data for " + name);
  return w;
}

}  // namespace slotforge
