#pragma once

// Sequence datasets: in-memory representation, the STCNSEQ1 binary
// container, synthetic presets and padded batching.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stcn/autodiff.hpp"
#include "stcn/errors.hpp"

namespace stcn {

/// Time-major sequence, one row per step.
using Sequence = Mat<double>;

struct SequenceSet {
  std::vector<Sequence> sequences;
  Eigen::Index feature_dim = 0;
  std::string name;

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += static_cast<std::size_t>(s.rows());
    return n;
  }

  /// Throws DomainError when a structural invariant is violated.
  void validate() const {
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      const auto& s = sequences[i];
      if (s.cols() != feature_dim)
        throw DomainError("sequence " + std::to_string(i) + " has D=" + std::to_string(s.cols()) +
                          ", expected " + std::to_string(feature_dim));
      if (s.rows() < 1) throw DomainError("sequence " + std::to_string(i) + " is empty");
      if (!s.allFinite()) throw DomainError("sequence " + std::to_string(i) + " has non-finite values");
    }
  }

  bool operator==(const SequenceSet& o) const {
    if (feature_dim != o.feature_dim || sequences.size() != o.sequences.size()) return false;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      if (sequences[i].rows() != o.sequences[i].rows() ||
          sequences[i].cols() != o.sequences[i].cols())
        return false;
      if (sequences[i] != o.sequences[i]) return false;
    }
    return true;
  }
};

/// Zero-padded batch. Row b*T_max + t of `data` is step t of sequence b.
template <typename S>
struct SequenceBatch {
  Mat<S> data;                      // [(B*T_max) x D]
  Mat<S> mask;                      // [B x T_max], 1 where t < lengths[b]
  std::vector<Eigen::Index> lengths;
  std::vector<std::size_t> indices;  // positions in the source SequenceSet

  Eigen::Index batch_size() const { return static_cast<Eigen::Index>(lengths.size()); }
  Eigen::Index max_len() const { return mask.cols(); }
  Eigen::Index feature_dim() const { return data.cols(); }
  Eigen::Index rows() const { return data.rows(); }

  /// Mask flattened to one column aligned with `data` rows.
  Mat<S> mask_column() const {
    Mat<S> m(mask.size(), 1);
    for (Eigen::Index b = 0; b < mask.rows(); ++b)
      for (Eigen::Index t = 0; t < mask.cols(); ++t) m(b * mask.cols() + t, 0) = mask(b, t);
    return m;
  }
};

/// Builds a batch from the given members of `set`, padded to `pad_to` steps
/// when that exceeds the longest member.
template <typename S>
SequenceBatch<S> make_batch(const SequenceSet& set, const std::vector<std::size_t>& members,
                            Eigen::Index pad_to = 0) {
  if (members.empty()) throw DomainError("make_batch: no members");
  Eigen::Index T = pad_to;
  for (auto i : members) T = std::max(T, set.sequences.at(i).rows());
  const Eigen::Index B = static_cast<Eigen::Index>(members.size());
  const Eigen::Index D = set.feature_dim;
  SequenceBatch<S> batch;
  batch.data = Mat<S>::Zero(B * T, D);
  batch.mask = Mat<S>::Zero(B, T);
  batch.indices = members;
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& s = set.sequences[members[static_cast<std::size_t>(b)]];
    if (s.cols() != D) throw ShapeError("make_batch: feature dim mismatch");
    batch.data.middleRows(b * T, s.rows()) = s.template cast<S>();
    batch.mask.row(b).head(s.rows()).setOnes();
    batch.lengths.push_back(s.rows());
  }
  return batch;
}

/// Partitions `set` into batches of at most `batch_size` sequences. With a
/// shuffle seed the order is a seeded permutation, otherwise insertion order.
template <typename S>
std::vector<SequenceBatch<S>> make_batches(const SequenceSet& set, std::size_t batch_size,
                                           std::optional<std::uint64_t> shuffle_seed = {}) {
  if (set.empty()) throw DomainError("make_batches: empty sequence set");
  if (batch_size < 1) throw DomainError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<SequenceBatch<S>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    out.push_back(make_batch<S>(
        set, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                      order.begin() + static_cast<std::ptrdiff_t>(end))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SynthPreset { sines, switching, strokes };

inline SynthPreset parse_preset(std::string_view s) {
  if (s == "sines") return SynthPreset::sines;
  if (s == "switching") return SynthPreset::switching;
  if (s == "strokes") return SynthPreset::strokes;
  throw DomainError("unknown synthetic preset: " + std::string(s));
}

inline std::string to_string(SynthPreset p) {
  switch (p) {
    case SynthPreset::sines: return "sines";
    case SynthPreset::switching: return "switching";
    case SynthPreset::strokes: return "strokes";
  }
  return "?";
}

/// Constants of the "switching" preset. Each sequence is cut into segments of
/// `segment_len` steps; every segment draws a regime r in {0, 1} uniformly.
/// Channel d at step t is
///   x[t, d] = sign(d) * level(r) + shared[t] + own[t, d]
/// with level(0) = +regime_mean, level(1) = -regime_mean, sign(d) = +1 for
/// even d and -1 for odd d, shared[t] ~ N(0, shared_std^2) common to all
/// channels, own[t, d] ~ N(0, own_std^2). Channel 0 at a segment start is
/// therefore a two-component mixture with modes at +-regime_mean.
struct SwitchingPreset {
  static constexpr Eigen::Index segment_len = 16;
  static constexpr double regime_mean = 2.0;
  static constexpr double shared_std = 0.5;
  static constexpr double own_std = 0.05;
};

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Deterministic synthetic sequences. Values are rounded to float32 so that
/// the set survives a container round trip unchanged.
inline SequenceSet generate_synthetic(SynthPreset preset, std::size_t n, Eigen::Index T,
                                      Eigen::Index D, std::uint64_t seed) {
  if (n < 1) throw DomainError("generate_synthetic: n must be >= 1");
  if (T < 2) throw DomainError("generate_synthetic: T must be >= 2");
  if (D < 1) throw DomainError("generate_synthetic: D must be >= 1");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  SequenceSet set;
  set.feature_dim = D;
  set.name = to_string(preset);
  set.sequences.reserve(n);

  for (std::size_t i = 0; i < n; ++i) {
    Sequence s(T, D);
    switch (preset) {
      case SynthPreset::sines: {
        const double omega = 0.1 + 0.5 * uniform(rng);
        for (Eigen::Index d = 0; d < D; ++d) {
          const double amp = 0.5 + uniform(rng);
          const double phase = 2.0 * M_PI * uniform(rng);
          for (Eigen::Index t = 0; t < T; ++t)
            s(t, d) = amp * std::sin(omega * static_cast<double>(t) * (1.0 + 0.25 * static_cast<double>(d)) + phase) +
                      0.05 * normal(rng);
        }
        break;
      }
      case SynthPreset::switching: {
        using P = SwitchingPreset;
        double level = 0.0;
        for (Eigen::Index t = 0; t < T; ++t) {
          if (t % P::segment_len == 0) level = uniform(rng) < 0.5 ? P::regime_mean : -P::regime_mean;
          const double shared = P::shared_std * normal(rng);
          for (Eigen::Index d = 0; d < D; ++d) {
            const double sign = (d % 2 == 0) ? 1.0 : -1.0;
            s(t, d) = sign * level + shared + P::own_std * normal(rng);
          }
        }
        break;
      }
      case SynthPreset::strokes: {
        // Pen offsets from a heading that drifts as a random walk.
        double heading = 2.0 * M_PI * uniform(rng);
        for (Eigen::Index t = 0; t < T; ++t) {
          heading += 0.3 * normal(rng);
          const double speed = std::abs(1.0 + 0.2 * normal(rng));
          for (Eigen::Index d = 0; d < D; ++d)
            s(t, d) = speed * std::cos(heading - 0.5 * M_PI * static_cast<double>(d));
        }
        break;
      }
    }
    set.sequences.push_back(s.unaryExpr(&detail::to_f32));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Binary container: "STCNSEQ1", u32 count, then per record u32 T, u32 D and
// T*D float32 values, time-major. Everything little-endian.

inline constexpr std::string_view kContainerMagic = "STCNSEQ1";

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::string& out, T v) {
  v = byteswap_if_big(v);
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* field) {
    if (pos_ + sizeof(T) > bytes_.size())
      throw FormatError("truncated payload: field '" + std::string(field) + "' at byte offset " +
                        std::to_string(pos_) + " needs " + std::to_string(sizeof(T)) +
                        " bytes, file has " + std::to_string(bytes_.size()));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(v);
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes a set to container bytes (values down-converted to float32).
inline std::string encode_container(const SequenceSet& set) {
  std::string out(kContainerMagic);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(set.size()));
  for (const auto& s : set.sequences) {
    if (s.cols() != set.feature_dim) throw ShapeError("encode_container: feature dim mismatch");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.rows()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.cols()));
    for (Eigen::Index t = 0; t < s.rows(); ++t)
      for (Eigen::Index d = 0; d < s.cols(); ++d)
        detail::put<float>(out, static_cast<float>(s(t, d)));
  }
  return out;
}

inline SequenceSet decode_container(const std::string& bytes) {
  if (bytes.size() < kContainerMagic.size() ||
      std::string_view(bytes).substr(0, kContainerMagic.size()) != kContainerMagic)
    throw FormatError("bad magic at byte offset 0: expected \"STCNSEQ1\"");
  detail::Reader r(bytes);
  for (std::size_t i = 0; i < kContainerMagic.size(); ++i) r.get<char>("magic");
  const auto count = r.get<std::uint32_t>("count");
  SequenceSet set;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t rec_off = r.pos();
    const auto T = r.get<std::uint32_t>("T");
    const auto D = r.get<std::uint32_t>("D");
    if (T == 0)
      throw FormatError("record " + std::to_string(i) + " at byte offset " + std::to_string(rec_off) +
                        ": field 'T' is zero");
    if (i == 0) {
      set.feature_dim = D;
    } else if (static_cast<Eigen::Index>(D) != set.feature_dim) {
      throw FormatError("record " + std::to_string(i) + " at byte offset " +
                        std::to_string(rec_off + 4) + ": field 'D' is " + std::to_string(D) +
                        ", expected " + std::to_string(set.feature_dim));
    }
    const std::size_t need = static_cast<std::size_t>(T) * D * sizeof(float);
    if (r.remaining() < need)
      throw FormatError("truncated payload: record " + std::to_string(i) + " at byte offset " +
                        std::to_string(r.pos()) + " needs " + std::to_string(need) +
                        " bytes, " + std::to_string(r.remaining()) + " remain");
    Sequence s(T, D);
    for (std::uint32_t t = 0; t < T; ++t)
      for (std::uint32_t d = 0; d < D; ++d) s(t, d) = static_cast<double>(r.get<float>("value"));
    set.sequences.push_back(std::move(s));
  }
  if (r.remaining() != 0)
    throw FormatError("count mismatch: header field 'count' says " + std::to_string(count) +
                      " records but " + std::to_string(r.remaining()) +
                      " trailing bytes remain at byte offset " + std::to_string(r.pos()));
  return set;
}

inline void write_container(const SequenceSet& set, const std::filesystem::path& path) {
  const std::string bytes = encode_container(set);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline SequenceSet read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  SequenceSet set = decode_container(bytes);
  set.name = path.stem().string();
  return set;
}

}  // namespace stcn
