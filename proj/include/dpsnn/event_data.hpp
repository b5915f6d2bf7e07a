#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dpsnn/dataset.hpp"
#include "dpsnn/errors.hpp"
#include "dpsnn/rng.hpp"

namespace dpsnn {

/// Synthetic event-driven classification task with the keyword-spotting tensor geometry
/// (T steps x 20 channels). Each class drives a fixed template of channels at `signal_rate`;
/// all other channels fire at `base_rate`.
struct TaskSpec {
  std::size_t n_classes = 10;
  std::size_t n_channels = 20;
  std::size_t t_steps = 200;
  std::size_t samples_per_class = 100;
  double base_rate = 0.02;
  double signal_rate = 0.35;
  double jitter = 0.05;
  std::uint64_t seed = 1;

  std::size_t template_width() const { return (n_channels + n_classes - 1) / n_classes + 2; }

  void validate() const {
    if (n_classes < 1 || n_channels < 1 || t_steps < 1 || samples_per_class < 1)
      throw ConfigError("TaskSpec: counts must be >= 1");
    if (!(base_rate >= 0.0 && base_rate <= 1.0) || !(signal_rate >= 0.0 && signal_rate <= 1.0))
      throw ConfigError("TaskSpec: rates must lie in [0, 1]");
    if (!(jitter >= 0.0)) throw ConfigError("TaskSpec: jitter must be >= 0");
  }
};

/// Channel templates. Channels are permuted once from the task seed; class c takes
/// `template_width()` consecutive channels of that permutation starting at c * stride
/// (stride = ceil(channels / classes)), wrapping around. Neighbouring classes therefore share
/// channels and no class is identified by a single channel.
inline std::vector<std::vector<std::size_t>> class_templates(const TaskSpec& spec) {
  spec.validate();
  std::vector<std::size_t> perm(spec.n_channels);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_stream(spec.seed, Stream::data, 0xC4A77E1);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t stride = (spec.n_channels + spec.n_classes - 1) / spec.n_classes;
  const std::size_t width = std::min(spec.template_width(), spec.n_channels);
  std::vector<std::vector<std::size_t>> out(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t i = 0; i < width; ++i) out[c].push_back(perm[(c * stride + i) % spec.n_channels]);
    std::sort(out[c].begin(), out[c].end());
  }
  return out;
}

/// Draws `samples_per_class` samples of every class, classes interleaved. Templates depend only
/// on `spec.seed`; spike trains are drawn from `rng`.
inline LabeledSpikes generate(const TaskSpec& spec, Rng& rng) {
  const auto templates = class_templates(spec);
  const std::size_t n = spec.samples_per_class * spec.n_classes;
  LabeledSpikes out;
  out.n_classes = spec.n_classes;
  out.spikes = SpikeTensor(n, spec.t_steps, spec.n_channels);
  out.labels.reserve(n);
  std::normal_distribution<double> jit(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> rate(spec.n_channels);
  std::size_t b = 0;
  for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
    for (std::size_t c = 0; c < spec.n_classes; ++c, ++b) {
      std::fill(rate.begin(), rate.end(), spec.base_rate);
      for (auto ch : templates[c]) rate[ch] = spec.signal_rate;
      for (auto& r : rate) r = std::clamp(r + spec.jitter * jit(rng), 0.0, 1.0);
      auto dst = out.spikes.sample(b);
      for (std::size_t t = 0; t < spec.t_steps; ++t)
        for (std::size_t j = 0; j < spec.n_channels; ++j) dst[t * spec.n_channels + j] = unif(rng) < rate[j] ? 1 : 0;
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

// Spike file layout (all integers little-endian):
//   0  magic "DPSK"
//   4  u32 version (1)
//   8  u32 samples, 12 u32 steps, 16 u32 channels, 20 u32 classes
//   24 bit-packed spikes, ceil(samples*steps*channels / 8) bytes. Spike (b, t, j) is bit
//      index (b*steps + t)*channels + j, least significant bit first; padding bits are zero.
//   .. u32 label per sample
inline constexpr std::array<char, 4> kSpikeFileMagic{'D', 'P', 'S', 'K'};
inline constexpr std::uint32_t kSpikeFileVersion = 1;
inline constexpr std::size_t kSpikeFileHeaderBytes = 24;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_spike_file(const LabeledSpikes& data) {
  data.validate();
  std::vector<std::uint8_t> out(kSpikeFileMagic.begin(), kSpikeFileMagic.end());
  detail::put_u32(out, kSpikeFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(data.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(data.steps()));
  detail::put_u32(out, static_cast<std::uint32_t>(data.channels()));
  detail::put_u32(out, static_cast<std::uint32_t>(data.n_classes));
  const auto& bits = data.spikes.raw();
  const std::size_t payload = (bits.size() + 7) / 8;
  const std::size_t start = out.size();
  out.resize(start + payload, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out[start + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  for (int y : data.labels) detail::put_u32(out, static_cast<std::uint32_t>(y));
  return out;
}

inline LabeledSpikes decode_spike_file(const std::vector<std::uint8_t>& bytes) {
  using Kind = FormatError::Kind;
  if (bytes.size() < kSpikeFileHeaderBytes)
    throw FormatError(Kind::header, bytes.size(), "truncated header: need 24 bytes");
  if (!std::equal(kSpikeFileMagic.begin(), kSpikeFileMagic.end(), bytes.begin()))
    throw FormatError(Kind::header, 0, "bad magic bytes");
  const auto version = detail::get_u32(bytes.data() + 4);
  if (version != kSpikeFileVersion)
    throw FormatError(Kind::header, 4, "unsupported version " + std::to_string(version));
  const std::size_t n = detail::get_u32(bytes.data() + 8);
  const std::size_t steps = detail::get_u32(bytes.data() + 12);
  const std::size_t channels = detail::get_u32(bytes.data() + 16);
  const std::size_t classes = detail::get_u32(bytes.data() + 20);
  if (n == 0) throw FormatError(Kind::header, 8, "sample count must be positive");
  if (steps == 0) throw FormatError(Kind::header, 12, "step count must be positive");
  if (channels == 0) throw FormatError(Kind::header, 16, "channel count must be positive");
  if (classes == 0) throw FormatError(Kind::header, 20, "class count must be positive");

  const std::size_t n_bits = n * steps * channels;
  const std::size_t payload = (n_bits + 7) / 8;
  const std::size_t label_start = kSpikeFileHeaderBytes + payload;
  if (bytes.size() < label_start)
    throw FormatError(Kind::payload, bytes.size(),
                      "truncated spike payload: expected " + std::to_string(payload) + " bytes");
  if (n_bits % 8 != 0) {
    const std::uint8_t pad_mask = static_cast<std::uint8_t>(0xFFu << (n_bits % 8));
    if (bytes[label_start - 1] & pad_mask)
      throw FormatError(Kind::payload, label_start - 1, "out-of-range spike value in padding bits");
  }
  const std::size_t end = label_start + 4 * n;
  if (bytes.size() < end)
    throw FormatError(Kind::labels, bytes.size(), "truncated label block: expected " + std::to_string(n) + " labels");
  if (bytes.size() > end) throw FormatError(Kind::labels, end, "trailing bytes after label block");

  LabeledSpikes out;
  out.n_classes = classes;
  std::vector<std::uint8_t> bits(n_bits);
  for (std::size_t i = 0; i < n_bits; ++i)
    bits[i] = (bytes[kSpikeFileHeaderBytes + i / 8] >> (i % 8)) & 1u;
  out.spikes = SpikeTensor(n, steps, channels, std::move(bits));
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = detail::get_u32(bytes.data() + label_start + 4 * i);
    if (y >= classes)
      throw FormatError(Kind::labels, label_start + 4 * i, "label " + std::to_string(y) + " out of range");
    out.labels.push_back(static_cast<int>(y));
  }
  return out;
}

inline void save_spike_file(const std::filesystem::path& path, const LabeledSpikes& data) {
  const auto bytes = encode_spike_file(data);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline LabeledSpikes load_spike_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_spike_file(bytes);
}

}  // namespace dpsnn
