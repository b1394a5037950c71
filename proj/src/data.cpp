#include "fgn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "fgn/rng.hpp"

namespace fgn {

void Dataset::validate() const {
  if (labels.empty()) throw std::invalid_argument("dataset is empty");
  if (inputs.rank() != 2 || inputs.shape[0] != labels.size())
    throw std::invalid_argument("dataset inputs " + shape_string(inputs.shape) + " do not match " +
                                std::to_string(labels.size()) + " labels");
  if (num_classes == 0) throw std::invalid_argument("dataset has no classes");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                                  " is out of range");
  if (!inputs.is_valid()) throw std::invalid_argument("dataset inputs are malformed");
  for (double v : inputs.data)
    if (!std::isfinite(v)) throw std::invalid_argument("dataset inputs are not finite");
}

IdxError::IdxError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_u32_be(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& file) {
  if (offset + 4 > bytes.size()) throw IdxError(file + ": truncated header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

Dataset make(std::size_t n, std::size_t dim, std::size_t classes, std::string provenance) {
  Dataset ds;
  ds.inputs = Tensor(Shape{n, dim});
  ds.labels.assign(n, 0);
  ds.num_classes = classes;
  ds.provenance = std::move(provenance);
  return ds;
}

}  // namespace

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels, bool normalize) {
  const std::string iname = images.filename().string(), lname = labels.filename().string();
  const auto ib = read_file(images);
  const auto lb = read_file(labels);

  if (read_u32_be(ib, 0, iname) != 2051) throw IdxError(iname + ": bad image magic", 0);
  const std::uint32_t count = read_u32_be(ib, 4, iname);
  const std::uint32_t rows = read_u32_be(ib, 8, iname);
  const std::uint32_t cols = read_u32_be(ib, 12, iname);
  const std::size_t dim = std::size_t{rows} * cols;
  const std::size_t need = 16 + std::size_t{count} * dim;
  if (ib.size() < need) throw IdxError(iname + ": truncated pixel data", ib.size());
  if (ib.size() > need) throw IdxError(iname + ": trailing bytes", need);

  if (read_u32_be(lb, 0, lname) != 2049) throw IdxError(lname + ": bad label magic", 0);
  const std::uint32_t lcount = read_u32_be(lb, 4, lname);
  if (lcount != count)
    throw IdxError(lname + ": " + std::to_string(lcount) + " labels for " + std::to_string(count) + " images", 4);
  if (lb.size() < 8 + std::size_t{lcount}) throw IdxError(lname + ": truncated label data", lb.size());
  if (lb.size() > 8 + std::size_t{lcount}) throw IdxError(lname + ": trailing bytes", 8 + std::size_t{lcount});
  if (count == 0) throw IdxError(iname + ": no images", 4);

  Dataset ds = make(count, dim, 10, "mnist:" + iname);
  for (std::size_t i = 0; i < std::size_t{count} * dim; ++i) ds.inputs[i] = ib[16 + i] / 255.0;
  for (std::size_t i = 0; i < count; ++i) {
    if (lb[8 + i] > 9) throw IdxError(lname + ": label out of range", 8 + i);
    ds.labels[i] = lb[8 + i];
  }
  if (normalize) fgn::normalize(ds, kMnistMean, kMnistStd);
  return ds;
}

Dataset load_mnist_split(const std::filesystem::path& dir, bool train, bool normalize) {
  const std::string prefix = train ? "train" : "t10k";
  return load_mnist_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), normalize);
}

Dataset gen_full_random(std::size_t n, std::size_t dim, double lo, double hi, std::uint64_t seed) {
  if (n == 0 || dim == 0) throw std::invalid_argument("gen_full_random: empty dataset");
  if (!(lo < hi)) throw std::invalid_argument("gen_full_random: lo must be below hi");
  Rng rng(seed);
  Dataset ds = make(n, dim, 1, "full-random");
  for (double& v : ds.inputs.data) v = rng.uniform(lo, hi);
  return ds;
}

Dataset shuffle_pixels(const Dataset& ds, std::uint64_t seed) {
  ds.validate();
  Rng rng(seed);
  Dataset out = ds;
  out.provenance = ds.provenance + "+shuffled";
  const std::size_t dim = ds.dim();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double* row = out.inputs.data.data() + i * dim;
    for (std::size_t j = dim; j > 1; --j) std::swap(row[j - 1], row[rng.below(j)]);
  }
  return out;
}

Dataset gen_toy_linear(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("gen_toy_linear: need at least 2 samples");
  Rng rng(seed);
  Dataset ds = make(n, 2, 2, "toy-linear");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double m = label == 0 ? 0.0 : 2.0;
    ds.inputs.at(i, 0) = m + 0.5 * rng.normal();
    ds.inputs.at(i, 1) = m + 0.5 * rng.normal();
    ds.labels[i] = label;
  }
  return ds;
}

Dataset gen_toy_rings(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("gen_toy_rings: need at least 2 samples");
  Rng rng(seed);
  Dataset ds = make(n, 2, 2, "toy-rings");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    // Area-uniform radius.
    const double r = label == 0 ? std::sqrt(rng.uniform()) : std::sqrt(rng.uniform(1.5 * 1.5, 2.5 * 2.5));
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    ds.inputs.at(i, 0) = r * std::cos(a);
    ds.inputs.at(i, 1) = r * std::sin(a);
    ds.labels[i] = label;
  }
  return ds;
}

Dataset gen_white_noise_signal(std::size_t n, std::size_t length, double lo, double hi, std::uint64_t seed,
                               double scale) {
  if (n == 0 || length == 0) throw std::invalid_argument("gen_white_noise_signal: empty dataset");
  if (!(lo < hi)) throw std::invalid_argument("gen_white_noise_signal: lo must be below hi");
  Rng rng(seed);
  Dataset ds = make(n, length, 1, scale == 1.0 ? "white-noise" : "white-noise-scaled");
  for (double& v : ds.inputs.data) v = scale * rng.uniform(lo, hi);
  return ds;
}

Dataset gen_tone_signals(std::size_t n, std::size_t length, std::size_t classes, std::uint64_t seed) {
  if (n == 0 || length == 0 || classes == 0) throw std::invalid_argument("gen_tone_signals: empty dataset");
  Rng rng(seed);
  Dataset ds = make(n, length, classes, "tones");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double freq = 2.0 * std::numbers::pi * static_cast<double>(label + 1) / static_cast<double>(length);
    for (std::size_t t = 0; t < length; ++t) {
      const double v = 0.8 * std::sin(freq * static_cast<double>(t) + phase) + rng.uniform(-0.2, 0.2);
      ds.inputs.at(i, t) = std::clamp(v, -1.0, 1.0);
    }
    ds.labels[i] = label;
  }
  return ds;
}

double normalize_value(double x, double mean, double std) { return (x - mean) / std; }
double denormalize_value(double z, double mean, double std) { return z * std + mean; }

void normalize(Dataset& ds, double mean, double std) {
  if (!(std > 0)) throw std::invalid_argument("normalize: std must be positive");
  if (ds.normalization.applied) throw std::invalid_argument("normalize: dataset is already normalized");
  for (double& v : ds.inputs.data) v = normalize_value(v, mean, std);
  ds.normalization = {mean, std, true};
}

void denormalize(Dataset& ds) {
  if (!ds.normalization.applied) return;
  for (double& v : ds.inputs.data) v = denormalize_value(v, ds.normalization.mean, ds.normalization.std);
  ds.normalization = {};
}

Dataset take(const Dataset& ds, std::size_t begin, std::size_t count) {
  if (begin + count > ds.size()) throw std::invalid_argument("take: range exceeds dataset");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return select(ds, idx);
}

Dataset select(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  const std::size_t dim = ds.dim();
  out.inputs = Tensor(Shape{indices.size(), dim});
  out.labels.resize(indices.size());
  out.num_classes = ds.num_classes;
  out.normalization = ds.normalization;
  out.provenance = ds.provenance;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw std::invalid_argument("select: index out of range");
    std::copy_n(ds.inputs.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * dim), dim,
                out.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
    out.labels[i] = ds.labels[indices[i]];
  }
  return out;
}

Dataset sample(const Dataset& ds, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  auto perm = rng.permutation(ds.size());
  perm.resize(std::min(count, ds.size()));
  return select(ds, perm);
}

Dataset augment_shifts(const Dataset& ds, std::size_t width, std::size_t height) {
  ds.validate();
  if (width * height != ds.dim()) throw std::invalid_argument("augment_shifts: image size does not match dimension");
  const double background =
      ds.normalization.applied ? normalize_value(0.0, ds.normalization.mean, ds.normalization.std) : 0.0;
  const std::size_t n = ds.size(), dim = ds.dim();
  const int shifts[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  Dataset out = ds;
  out.provenance = ds.provenance + "+shifts";
  out.inputs = Tensor(Shape{5 * n, dim}, background);
  std::copy(ds.inputs.data.begin(), ds.inputs.data.end(), out.inputs.data.begin());
  out.labels.resize(5 * n);
  for (std::size_t s = 0; s < 4; ++s) {
    const int dy = shifts[s][0], dx = shifts[s][1];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t dst = (s + 1) * n + i;
      out.labels[dst] = ds.labels[i];
      for (std::size_t y = 0; y < height; ++y) {
        const long sy = static_cast<long>(y) - dy;
        if (sy < 0 || sy >= static_cast<long>(height)) continue;
        for (std::size_t x = 0; x < width; ++x) {
          const long sx = static_cast<long>(x) - dx;
          if (sx < 0 || sx >= static_cast<long>(width)) continue;
          out.inputs.at(dst, y * width + x) = ds.inputs.at(i, static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx));
        }
      }
    }
  }
  return out;
}

void write_csv(const Dataset& ds, std::ostream& out) {
  out.precision(17);
  const std::size_t dim = ds.dim();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) out << ds.inputs.at(i, j) << ',';
    out << ds.labels[i] << '\n';
  }
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_csv(ds, out);
}

}  // namespace fgn
