#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgn/tensor.hpp"

namespace fgn {

inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

struct Normalization {
  double mean = 0.0;
  double std = 1.0;
  bool applied = false;
};

/// Row-per-sample dataset. Generators without meaningful labels use a single
/// class and label every sample 0.
struct Dataset {
  Tensor inputs;  // [N x D]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 1;
  Normalization normalization;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }
  std::span<const double> row(std::size_t i) const {
    return {inputs.data.data() + i * dim(), dim()};
  }
  /// Throws std::invalid_argument if an invariant is broken.
  void validate() const;
};

/// Malformed IDX input. `offset()` is the byte position where parsing failed.
class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels, bool normalize);

/// Looks for {train,t10k}-{images-idx3,labels-idx1}-ubyte under `dir`.
Dataset load_mnist_split(const std::filesystem::path& dir, bool train, bool normalize = true);

Dataset gen_full_random(std::size_t n, std::size_t dim, double lo, double hi, std::uint64_t seed);
Dataset shuffle_pixels(const Dataset& ds, std::uint64_t seed);

/// Two std-0.5 blobs at (0,0) and (2,2), on either side of the line through
/// (1,1) with normal (1,1). Labels alternate.
Dataset gen_toy_linear(std::size_t n, std::uint64_t seed);
/// Class 0 uniform on the unit disk, class 1 uniform on the annulus
/// 1.5 <= r <= 2.5. Labels alternate.
Dataset gen_toy_rings(std::size_t n, std::uint64_t seed);

/// Uniform noise in [lo, hi], then multiplied by `scale`.
Dataset gen_white_noise_signal(std::size_t n, std::size_t length, double lo, double hi, std::uint64_t seed,
                               double scale = 1.0);

/// Class-labelled 1-D signals for conv experiments: class k is a sinusoid of
/// frequency (k + 1) cycles per signal with random phase plus small noise,
/// bounded in [-1, 1].
Dataset gen_tone_signals(std::size_t n, std::size_t length, std::size_t classes, std::uint64_t seed);

void normalize(Dataset& ds, double mean, double std);
void denormalize(Dataset& ds);
double normalize_value(double x, double mean, double std);
double denormalize_value(double z, double mean, double std);

/// Rows [begin, begin + count).
Dataset take(const Dataset& ds, std::size_t begin, std::size_t count);
Dataset select(const Dataset& ds, const std::vector<std::size_t>& indices);
/// Random subset of min(count, size) rows without replacement.
Dataset sample(const Dataset& ds, std::size_t count, std::uint64_t seed);

/// The dataset followed by four copies of every image shifted one pixel
/// up, down, left and right. Vacated pixels take the background value (raw 0
/// mapped through the dataset's normalization).
Dataset augment_shifts(const Dataset& ds, std::size_t width, std::size_t height);

/// One row per sample: the D inputs, then the label.
void write_csv(const Dataset& ds, std::ostream& out);
void write_csv(const Dataset& ds, const std::filesystem::path& path);

}  // namespace fgn
