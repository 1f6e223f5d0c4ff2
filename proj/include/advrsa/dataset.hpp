#pragma once

// Procedural shape dataset: the desk-scale stand-in for natural images.

#include <advrsa/io.hpp>
#include <advrsa/network.hpp>
#include <advrsa/parallel.hpp>
#include <advrsa/random.hpp>
#include <advrsa/tensor.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrsa {

inline constexpr std::array<const char*, 10> shape_class_names = {
    "disk", "square", "triangle", "ring", "cross", "stripes", "checker", "star", "crescent", "dots"};

struct LabeledImage {
  std::string id;
  Tensor image;  // [3,S,S], values in [0,1]
  std::size_t label = 0;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  std::size_t classes = 8;
  std::size_t train_per_class = 160;
  std::size_t val_per_class = 40;
  std::size_t image_size = 32;
  double noise_sd = 0.04;
  std::uint64_t seed = 1;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
};

namespace detail {

// Membership test in shape-local coordinates (unit radius, unrotated).
inline bool inside_shape(std::size_t cls, double u, double v) {
  const double rho = std::hypot(u, v);
  const double box = std::max(std::abs(u), std::abs(v));
  switch (cls) {
    case 0: return rho <= 1.0;
    case 1: return box <= 0.8;
    case 2: {
      const double s3 = std::numbers::sqrt3;
      return v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0;
    }
    case 3: return rho >= 0.55 && rho <= 1.0;
    case 4: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 5: return box <= 1.0 && static_cast<long>(std::floor((u + 1.0) / 0.4)) % 2 == 0;
    case 6: return box <= 1.0 && (static_cast<long>(std::floor((u + 1.0) / 0.5)) +
                                  static_cast<long>(std::floor((v + 1.0) / 0.5))) % 2 == 0;
    case 7: {
      double t = std::atan2(v, u) / (2.0 * std::numbers::pi) * 5.0 + 0.25;
      t -= std::floor(t);
      return rho <= 0.42 + 0.58 * std::abs(2.0 * t - 1.0);
    }
    case 8: return rho <= 1.0 && std::hypot(u - 0.45, v) > 0.8;
    case 9: {
      for (int i = -1; i <= 1; ++i) {
        for (int j = -1; j <= 1; ++j) {
          if (std::hypot(u - 0.62 * i, v - 0.62 * j) <= 0.2) return true;
        }
      }
      return false;
    }
    default: throw std::out_of_range("shape class out of range");
  }
}

}  // namespace detail

/// Renders one image of class `cls`: random placement, scale, rotation and
/// contrasting foreground/background colors, 2x2 supersampled, plus pixel noise.
inline Tensor render_shape(std::size_t cls, std::uint64_t seed, std::size_t size = 32, double noise_sd = 0.04) {
  if (cls >= shape_class_names.size()) throw std::out_of_range("shape class " + std::to_string(cls));
  Engine eng(seed);
  const double s = static_cast<double>(size);
  const double cx = s * (0.42 + 0.16 * uniform01(eng));
  const double cy = s * (0.42 + 0.16 * uniform01(eng));
  const double radius = s * (0.30 + 0.08 * uniform01(eng));
  const double theta = 2.0 * std::numbers::pi * uniform01(eng);
  std::array<double, 3> bg{}, fg{};
  for (;;) {
    for (auto& c : bg) c = uniform01(eng);
    for (auto& c : fg) c = uniform01(eng);
    const double d = std::hypot(bg[0] - fg[0], bg[1] - fg[1], bg[2] - fg[2]);
    if (d >= 0.55) break;
  }
  const double ct = std::cos(theta), st = std::sin(theta);
  Tensor img({3, size, size});
  std::normal_distribution<double> noise(0.0, noise_sd);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double cover = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          const double u = (ct * px + st * py) / radius;
          const double v = (-st * px + ct * py) / radius;
          if (detail::inside_shape(cls, u, v)) cover += 0.25;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double val = cover * fg[c] + (1.0 - cover) * bg[c] + (noise_sd > 0 ? noise(eng) : 0.0);
        img.at(c, y, x) = std::clamp(val, 0.0, 1.0);
      }
    }
  }
  return img;
}

/// Balanced train/val sets; classes interleave so any prefix stays near balanced.
inline Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.classes < 2 || spec.classes > shape_class_names.size()) {
    throw std::invalid_argument("dataset: class count must be in [2, " + std::to_string(shape_class_names.size()) + "]");
  }
  Dataset ds{spec, {}, {}};
  auto build = [&](std::size_t per_class, std::uint64_t split, const char* prefix) {
    std::vector<LabeledImage> out(per_class * spec.classes);
    parallel_for(out.size(), [&](std::size_t n) {
      const std::size_t i = n / spec.classes, c = n % spec.classes;
      LabeledImage& li = out[n];
      li.label = c;
      li.seed = derive_seed(spec.seed, {split, c, i});
      li.image = render_shape(c, li.seed, spec.image_size, spec.noise_sd);
      char id[64];
      std::snprintf(id, sizeof id, "%s_c%zu_%05zu", prefix, c, i);
      li.id = id;
    });
    return out;
  };
  ds.train = build(spec.train_per_class, 1, "train");
  ds.val = build(spec.val_per_class, 2, "val");
  return ds;
}

inline Tensor mean_image(const std::vector<LabeledImage>& images) {
  if (images.empty()) throw std::invalid_argument("mean_image: empty image set");
  Tensor sum(images.front().image.shape());
  for (const LabeledImage& li : images) sum += li.image;
  sum *= 1.0 / static_cast<double>(images.size());
  return sum;
}

/// Picks K validation images the network classifies correctly with at least
/// `threshold` confidence, quota K/C per class (remainder to the lowest classes).
/// Candidates are visited in a seeded random order; the result is class-major.
inline std::vector<LabeledImage> select_re_stimuli(const Network& net, const std::vector<LabeledImage>& pool,
                                                   std::size_t k, double threshold = 0.99, std::uint64_t seed = 0) {
  const std::size_t classes = net.config().classes;
  std::vector<std::size_t> quota(classes, k / classes);
  for (std::size_t c = 0; c < k % classes; ++c) ++quota[c];
  std::vector<Tensor> probs(pool.size());
  parallel_for(pool.size(), [&](std::size_t i) { probs[i] = predict(net, pool[i].image); });
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  Engine eng = make_engine(seed, {0x5e1ec7});
  std::shuffle(order.begin(), order.end(), eng);
  std::vector<std::vector<LabeledImage>> picked(classes);
  for (std::size_t i : order) {
    const std::size_t y = pool[i].label;
    if (y >= classes) throw std::out_of_range("select_re_stimuli: label out of range");
    if (picked[y].size() >= quota[y]) continue;
    if (argmax(probs[i]) == y && probs[i][y] >= threshold) picked[y].push_back(pool[i]);
  }
  std::string shortfall;
  for (std::size_t c = 0; c < classes; ++c) {
    if (picked[c].size() < quota[c]) {
      shortfall += " class " + std::to_string(c) + ": " + std::to_string(picked[c].size()) + "/" +
                   std::to_string(quota[c]) + ";";
    }
  }
  if (!shortfall.empty()) {
    throw std::runtime_error("select_re_stimuli: not enough images at confidence >= " + format_double(threshold) +
                             ":" + shortfall);
  }
  std::vector<LabeledImage> out;
  for (auto& v : picked) {
    for (auto& li : v) out.push_back(std::move(li));
  }
  return out;
}

// ---- image files --------------------------------------------------------------

inline constexpr std::string_view image_magic = "ADVIMG01";

inline std::filesystem::path sidecar_path(const std::filesystem::path& image_path) {
  std::filesystem::path p = image_path;
  return p.replace_extension(".advimg");
}

inline std::string encode_ppm(const Tensor& img, const std::string& comment = {}) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("PPM export needs a [3,H,W] tensor");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string out = "P6\n";
  if (!comment.empty()) out += "# " + comment + "\n";
  out += std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
  }
  return out;
}

inline Tensor decode_ppm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError(name + " at byte " + std::to_string(pos) + ": " + what);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw fail("expected an integer in the PPM header");
    return std::stoul(bytes.substr(start, pos - start));
  };
  if (bytes.compare(0, 2, "P6") != 0) throw fail("not a binary PPM (missing P6 magic)");
  pos = 2;
  const std::size_t w = read_int(), h = read_int(), maxval = read_int();
  if (w == 0 || h == 0) throw fail("zero image extent");
  if (maxval != 255) throw fail("only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("malformed header end");
  ++pos;
  if (bytes.size() - pos < 3 * w * h) throw fail("truncated pixel payload");
  Tensor img({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<unsigned char>(bytes[pos++]) / 255.0;
      }
    }
  }
  return img;
}

inline std::string encode_sidecar(const Tensor& t) {
  ByteWriter w;
  w.bytes(image_magic);
  w.u64(t.rank());
  for (std::size_t e : t.shape()) w.u64(e);
  w.f64s(t.values());
  return w.str();
}

inline Tensor decode_sidecar(std::string bytes, const std::string& name) {
  ByteReader r(std::move(bytes), name);
  if (r.bytes(image_magic.size()) != image_magic) r.fail("bad magic (expected ADVIMG01)");
  const std::uint64_t rank = r.u64();
  if (rank == 0 || rank > 8) r.fail("implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.u64();
    if (e == 0 || e > (1u << 24)) r.fail("implausible extent " + std::to_string(e));
  }
  Tensor t(shape);
  r.f64s(t.values());
  if (!r.at_end()) r.fail("trailing bytes after tensor payload");
  return t;
}

/// Writes `path` as an 8-bit PPM and an exact sidecar next to it.
inline void write_image(const std::filesystem::path& path, const Tensor& img, const std::string& comment = {}) {
  write_text_file(path, encode_ppm(img, comment));
  write_text_file(sidecar_path(path), encode_sidecar(img));
}

/// Reads the exact sidecar when present, otherwise the quantized PPM.
inline Tensor read_image(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) return decode_sidecar(read_text_file(side), side.string());
  return decode_ppm(read_text_file(path), path.string());
}

}  // namespace advrsa
