#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "fgn/data.hpp"
#include "fgn/layers.hpp"

namespace fgn {

struct Prediction {
  std::size_t class_index = 0;
  double confidence = 0.0;
};

/// Softmax, then (argmax, max); ties go to the lowest index.
Prediction confidence(std::span<const double> logits);

std::vector<Prediction> predict(const Network& net, const Tensor& inputs);

struct ConfidenceHistogram {
  std::vector<double> edges;  // bins + 1 values over [0, 1]
  std::vector<std::size_t> counts;
  std::vector<double> confidences;

  std::size_t total() const { return confidences.size(); }
  /// Fraction of confidences strictly above theta.
  double fraction_above(double theta) const;
};

ConfidenceHistogram histogram_confidences(const Network& net, const Dataset& data, std::size_t bins = 10);

/// Fraction of inputs whose confidence is below theta.
double rejection_rate(const Network& net, const Dataset& data, double theta);

struct GridCell {
  std::size_t class_index = 0;
  double confidence = 0.0;
  double value = 0.0;  // raw output for single-neuron renders
};

struct GridRender {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<GridCell> cells;  // row-major, row 0 at v = -half_width / y_min
  std::size_t classes = 0;      // 0 for raw single-neuron renders
  // Cross-section axes; empty for heatmaps.
  std::vector<double> center;
  std::vector<double> dir1;
  std::vector<double> dir2;
  double half_width = 0.0;
  // Heatmap extents.
  std::array<double, 2> x_range{0.0, 0.0};
  std::array<double, 2> y_range{0.0, 0.0};

  const GridCell& at(std::size_t row, std::size_t col) const { return cells.at(row * width + col); }
};

/// Class and confidence of a 2-input network over a resolution x resolution grid.
GridRender activity_heatmap(const Network& net, std::array<double, 2> x_range, std::array<double, 2> y_range,
                            std::size_t resolution);

/// Raw output of one neuron (index `unit`) of a 2-input layer.
GridRender neuron_heatmap(const Layer& layer, std::size_t unit, std::array<double, 2> x_range,
                          std::array<double, 2> y_range, std::size_t resolution);

/// Cell (i, j) evaluates center + u dir1 + v dir2 with u, v spanning
/// [-half_width, half_width]. Directions are orthonormalized (Gram-Schmidt);
/// parallel directions are rejected. resolution 1 samples only the center.
GridRender cross_section(const Network& net, std::span<const double> center, std::span<const double> dir1,
                         std::span<const double> dir2, double half_width, std::size_t resolution);

/// Standard-normal vector with `against` projected out, normalized.
std::vector<double> random_orthogonal(std::span<const double> against, std::uint64_t seed);

/// dir1 is the signed loss gradient at x (the FGSM direction), dir2 a seeded
/// random orthogonal direction.
GridRender fgsm_cross_section(const Network& net, std::span<const double> x, std::size_t label, double half_width,
                              std::size_t resolution, std::uint64_t seed);

/// The center row runs from image a (left edge) to image b (right edge).
GridRender image_cross_section(const Network& net, std::span<const double> a, std::span<const double> b,
                               std::size_t resolution, std::uint64_t seed);

/// Fixed 10-class palette, repeated for more classes.
std::array<std::uint8_t, 3> class_color(std::size_t class_index);

/// row,col,u,v,class,confidence,value
void write_grid_csv(const GridRender& grid, std::ostream& out);
void write_grid_csv(const GridRender& grid, const std::filesystem::path& path);
/// Binary P6. Class renders scale the class color by how far the confidence
/// rises above 1/K (uniform output is black); raw renders map value to a
/// blue-white-red ramp over the symmetric value range.
void write_grid_ppm(const GridRender& grid, std::ostream& out);
void write_grid_ppm(const GridRender& grid, const std::filesystem::path& path);

}  // namespace fgn
