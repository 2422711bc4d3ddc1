#include "psat/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "psat/errors.hpp"

namespace psat {

std::string synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::blobs: return "blobs";
    case SynthKind::stripes: return "stripes";
    case SynthKind::checker: return "checker";
  }
  return "?";
}

SynthKind synth_kind_from_name(const std::string& s) {
  if (s == "blobs") return SynthKind::blobs;
  if (s == "stripes") return SynthKind::stripes;
  if (s == "checker") return SynthKind::checker;
  throw ConfigError("unknown synthetic dataset \"" + s + "\", expected blobs, stripes or checker");
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// Base intensity of pixel (ch, i, j) for class c, before noise. Each kind
// keys the pattern on the class so classes stay linearly separable.
double synth_pattern(SynthKind kind, size_t c, size_t classes, size_t ch, size_t i, size_t j,
                     size_t h, size_t w) {
  switch (kind) {
    case SynthKind::blobs: {
      // Wide, overlapping, low-contrast bumps: the class evidence is spread
      // over most pixels, so no single norm's budget towers over the others
      // the way it would against small bright spots.
      const double ang = 2.0 * kPi * double(c) / double(classes);
      const double cy = 0.5 * double(h - 1) + 0.3 * double(h - 1) * std::sin(ang);
      const double cx = 0.5 * double(w - 1) + 0.3 * double(w - 1) * std::cos(ang);
      const double sig = 0.25 * double(std::min(h, w));
      const double d2 = (double(i) - cy) * (double(i) - cy) + (double(j) - cx) * (double(j) - cx);
      const double bump = std::exp(-d2 / (2.0 * sig * sig));
      return 0.1 + 0.3 * bump * (1.0 - 0.08 * double(ch));
    }
    case SynthKind::stripes: {
      const double freq = 1.0 + double(c);
      const double t = (c % 2 == 0) ? double(i) / double(h) : double(j) / double(w);
      return 0.5 + 0.4 * std::sin(2.0 * kPi * freq * t + 0.3 * double(ch));
    }
    case SynthKind::checker: {
      const size_t cell = 2 + c;
      const bool on = ((i / cell) + (j / cell) + ch) % 2 == 0;
      return on ? 0.8 : 0.2;
    }
  }
  return 0.0;
}

template <typename T>
Dataset<T> synth_split(const SynthConfig& cfg, uint64_t split_tag, const char* split_name) {
  const size_t n = cfg.classes * cfg.n_per_class;
  const size_t per = cfg.channels * cfg.height * cfg.width;
  Dataset<T> d;
  d.x = Tensor<T>::zeros({n, cfg.channels, cfg.height, cfg.width});
  d.y.resize(n);
  d.num_classes = cfg.classes;
  d.split = split_name;
  d.provenance = synth_kind_name(cfg.kind) + "(seed=" + std::to_string(cfg.seed) + ")";
  T* out = d.x.data();
  const uint64_t split_seed = mix64(cfg.seed, split_tag);
  for (size_t ex = 0; ex < n; ++ex) {
    const size_t c = ex % cfg.classes;
    d.y[ex] = int(c);
    RandomStream rs(mix64(split_seed, ex));
    T* row = out + ex * per;
    size_t k = 0;
    for (size_t ch = 0; ch < cfg.channels; ++ch)
      for (size_t i = 0; i < cfg.height; ++i)
        for (size_t j = 0; j < cfg.width; ++j, ++k) {
          double v = synth_pattern(cfg.kind, c, cfg.classes, ch, i, j, cfg.height, cfg.width);
          if (cfg.noise_std > 0) v += cfg.noise_std * rs.normal();
          row[k] = static_cast<T>(std::min(1.0, std::max(0.0, v)));
        }
  }
  return d;
}

}  // namespace

template <typename T>
Dataset<T> synth_generate_one(const SynthConfig& cfg, const std::string& split) {
  if (cfg.classes < 2) throw ContractError("synthetic dataset needs >= 2 classes");
  if (cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 || cfg.n_per_class == 0)
    throw ContractError("synthetic dataset size must be positive in every dimension");
  if (split == "train") return synth_split<T>(cfg, 1, "train");
  if (split == "test") return synth_split<T>(cfg, 2, "test");
  throw ContractError("split must be \"train\" or \"test\", got \"" + split + "\"");
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> synth_generate(const SynthConfig& cfg) {
  return {synth_generate_one<T>(cfg, "train"), synth_generate_one<T>(cfg, "test")};
}

namespace {
constexpr size_t kCifarRecord = 3073;
constexpr size_t kCifarPixels = 3072;
}  // namespace

template <typename T>
Dataset<T> read_cifar10_binary(const std::vector<std::string>& paths, std::string split) {
  Dataset<T> d;
  d.num_classes = 10;
  d.split = std::move(split);
  std::vector<T> pixels;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecord != 0) {
      const size_t offset = (bytes.size() / kCifarRecord) * kCifarRecord;
      throw FormatError(path + ": incomplete record at offset " + std::to_string(offset) +
                        " (file length " + std::to_string(bytes.size()) +
                        " is not a multiple of 3073)");
    }
    for (size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      const unsigned char label = bytes[off];
      if (label > 9)
        throw FormatError(path + ": label " + std::to_string(int(label)) + " at offset " +
                          std::to_string(off) + " exceeds 9");
      d.y.push_back(int(label));
      for (size_t k = 0; k < kCifarPixels; ++k)
        pixels.push_back(static_cast<T>(bytes[off + 1 + k] / 255.0));
    }
    if (!d.provenance.empty()) d.provenance += ",";
    d.provenance += path;
  }
  if (d.y.empty()) throw FormatError("no records found");
  d.x = Tensor<T>::from({d.y.size(), size_t{3}, size_t{32}, size_t{32}}, std::move(pixels));
  return d;
}

template <typename T>
void write_cifar10_binary(const Dataset<T>& d, const std::string& path) {
  if (d.x.ndim() != 4 || d.x.extent(1) != 3 || d.x.extent(2) != 32 || d.x.extent(3) != 32)
    throw FormatError("dataset shape " + shape_str(d.x.shape()) +
                      " does not fit the 3x32x32 record format");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const T* px = d.x.data();
  for (size_t ex = 0; ex < d.y.size(); ++ex) {
    const unsigned char label = static_cast<unsigned char>(d.y[ex]);
    f.put(char(label));
    for (size_t k = 0; k < kCifarPixels; ++k) {
      const long v = std::lround(double(px[ex * kCifarPixels + k]) * 255.0);
      f.put(char(static_cast<unsigned char>(std::min(255l, std::max(0l, v)))));
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

template <typename T>
void random_hflip(Tensor<T>& batch, RandomStream& rs) {
  const size_t n = batch.extent(0), c = batch.extent(1), h = batch.extent(2), w = batch.extent(3);
  T* px = batch.data();
  for (size_t ex = 0; ex < n; ++ex) {
    if (rs.uniform() >= 0.5) continue;
    T* img = px + ex * c * h * w;
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t i = 0; i < h; ++i) {
        T* row = img + (ch * h + i) * w;
        std::reverse(row, row + w);
      }
  }
}

#define PSAT_INSTANTIATE(T)                                                                \
  template std::pair<Dataset<T>, Dataset<T>> synth_generate(const SynthConfig&);           \
  template Dataset<T> synth_generate_one(const SynthConfig&, const std::string&);          \
  template Dataset<T> read_cifar10_binary(const std::vector<std::string>&, std::string);   \
  template void write_cifar10_binary(const Dataset<T>&, const std::string&);               \
  template void random_hflip(Tensor<T>&, RandomStream&);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
