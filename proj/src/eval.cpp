#include "fgn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "fgn/attacks.hpp"
#include "fgn/parallel.hpp"
#include "fgn/rng.hpp"

namespace fgn {

Prediction confidence(std::span<const double> logits) {
  if (logits.size() < 2) throw std::invalid_argument("confidence needs at least 2 logits");
  for (double v : logits)
    if (!std::isfinite(v)) throw std::invalid_argument("confidence: non-finite logit");
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k)
    if (logits[k] > logits[best]) best = k;
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - logits[best]);
  return {best, 1.0 / sum};
}

std::vector<Prediction> predict(const Network& net, const Tensor& inputs) {
  const Tensor logits = predict_logits(net, inputs);
  std::vector<Prediction> out(logits.rows());
  const std::size_t k = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = confidence({logits.data.data() + r * k, k});
  return out;
}

double ConfidenceHistogram::fraction_above(double theta) const {
  if (confidences.empty()) return 0.0;
  const auto n = std::count_if(confidences.begin(), confidences.end(), [&](double c) { return c > theta; });
  return static_cast<double>(n) / static_cast<double>(confidences.size());
}

ConfidenceHistogram histogram_confidences(const Network& net, const Dataset& data, std::size_t bins) {
  if (data.size() == 0) throw std::invalid_argument("histogram: empty dataset");
  if (bins == 0) throw std::invalid_argument("histogram: bins must be positive");
  ConfidenceHistogram h;
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(static_cast<double>(i) / static_cast<double>(bins));
  h.counts.assign(bins, 0);
  for (const Prediction& p : predict(net, data.inputs)) {
    h.confidences.push_back(p.confidence);
    const auto b = static_cast<std::size_t>(p.confidence * static_cast<double>(bins));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

double rejection_rate(const Network& net, const Dataset& data, double theta) {
  if (!(theta > 0 && theta <= 1)) throw std::invalid_argument("rejection threshold must be in (0, 1]");
  if (data.size() == 0) return 0.0;
  std::size_t n = 0;
  for (const Prediction& p : predict(net, data.inputs)) n += p.confidence < theta;
  return static_cast<double>(n) / static_cast<double>(data.size());
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double linspace(std::array<double, 2> range, std::size_t i, std::size_t n) {
  return range[0] + (range[1] - range[0]) * static_cast<double>(i) / static_cast<double>(n - 1);
}

// Evaluates the network on every grid point, fanning chunks out to workers.
void fill_class_cells(const Network& net, GridRender& grid, std::size_t dim,
                      const std::function<void(std::size_t cell, std::span<double> point)>& point_of) {
  const std::size_t n = grid.width * grid.height;
  grid.cells.assign(n, {});
  constexpr std::size_t kChunk = 1024;
  parallel_for((n + kChunk - 1) / kChunk, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const std::size_t begin = c * kChunk, end = std::min(n, begin + kChunk);
      Tensor pts(Shape{end - begin, dim});
      for (std::size_t i = begin; i < end; ++i) point_of(i, {pts.data.data() + (i - begin) * dim, dim});
      const std::vector<Prediction> preds = predict(net, pts);
      for (std::size_t i = begin; i < end; ++i) {
        grid.cells[i].class_index = preds[i - begin].class_index;
        grid.cells[i].confidence = preds[i - begin].confidence;
      }
    }
  });
}

void check_ranges(std::array<double, 2> x_range, std::array<double, 2> y_range, std::size_t resolution) {
  if (resolution < 2) throw std::invalid_argument("heatmap resolution must be >= 2");
  if (!(x_range[0] < x_range[1]) || !(y_range[0] < y_range[1]))
    throw std::invalid_argument("heatmap ranges must be increasing");
}

}  // namespace

GridRender activity_heatmap(const Network& net, std::array<double, 2> x_range, std::array<double, 2> y_range,
                            std::size_t resolution) {
  if (network_input_dim(net) != 2) throw std::invalid_argument("activity heatmap needs a 2-input network");
  check_ranges(x_range, y_range, resolution);
  GridRender g;
  g.width = g.height = resolution;
  g.x_range = x_range;
  g.y_range = y_range;
  g.classes = network_output_dim(net, 2);
  fill_class_cells(net, g, 2, [&](std::size_t cell, std::span<double> p) {
    p[0] = linspace(x_range, cell % resolution, resolution);
    p[1] = linspace(y_range, cell / resolution, resolution);
  });
  return g;
}

GridRender neuron_heatmap(const Layer& layer, std::size_t unit, std::array<double, 2> x_range,
                          std::array<double, 2> y_range, std::size_t resolution) {
  check_ranges(x_range, y_range, resolution);
  std::function<double(std::span<const double>)> eval;
  if (const auto* d = std::get_if<DenseLayer>(&layer)) {
    if (d->in_dim() != 2 || unit >= d->out_dim()) throw std::invalid_argument("neuron heatmap needs a 2-input unit");
    eval = [d, unit](std::span<const double> x) { return dense_forward(*d, x)[unit]; };
  } else if (const auto* f = std::get_if<FgnDenseLayer>(&layer)) {
    if (f->in_dim() != 2 || unit >= f->out_dim()) throw std::invalid_argument("neuron heatmap needs a 2-input unit");
    eval = [f, unit](std::span<const double> x) { return fgn_dense_forward(*f, x).y[unit]; };
  } else {
    throw std::invalid_argument("neuron heatmap needs a dense layer");
  }
  GridRender g;
  g.width = g.height = resolution;
  g.x_range = x_range;
  g.y_range = y_range;
  g.cells.resize(resolution * resolution);
  for (std::size_t r = 0; r < resolution; ++r)
    for (std::size_t c = 0; c < resolution; ++c) {
      const double p[2] = {linspace(x_range, c, resolution), linspace(y_range, r, resolution)};
      g.cells[r * resolution + c].value = eval(p);
    }
  return g;
}

GridRender cross_section(const Network& net, std::span<const double> center, std::span<const double> dir1,
                         std::span<const double> dir2, double half_width, std::size_t resolution) {
  const std::size_t d = center.size();
  if (dir1.size() != d || dir2.size() != d) throw std::invalid_argument("cross section: dimension mismatch");
  if (resolution < 1) throw std::invalid_argument("cross section: resolution must be >= 1");
  if (!(half_width >= 0) || (resolution > 1 && !(half_width > 0)))
    throw std::invalid_argument("cross section: half width must be positive");
  GridRender g;
  g.center.assign(center.begin(), center.end());
  g.dir1.assign(dir1.begin(), dir1.end());
  g.dir2.assign(dir2.begin(), dir2.end());
  const double n1 = std::sqrt(dot(g.dir1, g.dir1));
  const double n2 = std::sqrt(dot(g.dir2, g.dir2));
  if (!(n1 > 0) || !(n2 > 0)) throw std::invalid_argument("cross section: zero direction");
  for (double& v : g.dir1) v /= n1;
  const double proj = dot(g.dir2, g.dir1);
  for (std::size_t i = 0; i < d; ++i) g.dir2[i] -= proj * g.dir1[i];
  const double r2 = std::sqrt(dot(g.dir2, g.dir2));
  if (!(r2 > 1e-9 * n2)) throw std::invalid_argument("cross section: directions are parallel");
  for (double& v : g.dir2) v /= r2;
  g.half_width = half_width;
  g.width = g.height = resolution;
  g.classes = network_output_dim(net, d);
  auto coord = [&](std::size_t i) {
    return resolution == 1 ? 0.0 : -half_width + 2.0 * half_width * static_cast<double>(i) / static_cast<double>(resolution - 1);
  };
  fill_class_cells(net, g, d, [&](std::size_t cell, std::span<double> p) {
    const double u = coord(cell % resolution), v = coord(cell / resolution);
    for (std::size_t i = 0; i < d; ++i) p[i] = g.center[i] + u * g.dir1[i] + v * g.dir2[i];
  });
  return g;
}

std::vector<double> random_orthogonal(std::span<const double> against, std::uint64_t seed) {
  const double na = dot(against, against);
  if (!(na > 0)) throw std::invalid_argument("random_orthogonal: zero reference direction");
  if (against.size() < 2) throw std::invalid_argument("random_orthogonal: needs at least 2 dimensions");
  Rng rng(seed);
  for (;;) {
    std::vector<double> v(against.size());
    for (double& x : v) x = rng.normal();
    const double p = dot(v, against) / na;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * against[i];
    const double n = std::sqrt(dot(v, v));
    if (n > 1e-9) {
      for (double& x : v) x /= n;
      return v;
    }
  }
}

GridRender fgsm_cross_section(const Network& net, std::span<const double> x, std::size_t label, double half_width,
                              std::size_t resolution, std::uint64_t seed) {
  std::vector<double> dir = loss_gradient(net, x, label);
  for (double& v : dir) v = v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0;
  const double len = std::sqrt(dot(dir, dir));
  if (!(len > 0)) throw std::invalid_argument("fgsm cross section: loss gradient is zero at the center");
  // half_width is the FGSM epsilon, so the right end of the center row is
  // exactly x + eps * sign(grad).
  const std::vector<double> other = random_orthogonal(dir, seed);
  return cross_section(net, x, dir, other, half_width * len, resolution);
}

GridRender image_cross_section(const Network& net, std::span<const double> a, std::span<const double> b,
                               std::size_t resolution, std::uint64_t seed) {
  if (a.size() != b.size()) throw std::invalid_argument("image cross section: size mismatch");
  if (resolution < 3 || resolution % 2 == 0) throw std::invalid_argument("image cross section: resolution must be odd and >= 3");
  std::vector<double> center(a.size()), dir(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    center[i] = 0.5 * (a[i] + b[i]);
    dir[i] = b[i] - a[i];
  }
  const double len = std::sqrt(dot(dir, dir));
  if (!(len > 0)) throw std::invalid_argument("image cross section: identical images");
  return cross_section(net, center, dir, random_orthogonal(dir, seed), 0.5 * len, resolution);
}

std::array<std::uint8_t, 3> class_color(std::size_t class_index) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 10> kPalette{{
      {31, 119, 180},   // 0 blue
      {255, 127, 14},   // 1 orange
      {44, 160, 44},    // 2 green
      {214, 39, 40},    // 3 red
      {148, 103, 189},  // 4 purple
      {140, 86, 75},    // 5 brown
      {227, 119, 194},  // 6 pink
      {127, 127, 127},  // 7 gray
      {188, 189, 34},   // 8 olive
      {23, 190, 207},   // 9 cyan
  }};
  return kPalette[class_index % kPalette.size()];
}

namespace {

std::array<double, 2> cell_coords(const GridRender& g, std::size_t row, std::size_t col) {
  if (!g.center.empty()) {
    auto coord = [&](std::size_t i, std::size_t n) {
      return n == 1 ? 0.0 : -g.half_width + 2.0 * g.half_width * static_cast<double>(i) / static_cast<double>(n - 1);
    };
    return {coord(col, g.width), coord(row, g.height)};
  }
  return {linspace(g.x_range, col, g.width), linspace(g.y_range, row, g.height)};
}

}  // namespace

void write_grid_csv(const GridRender& grid, std::ostream& out) {
  out << "row,col,u,v,class,confidence,value\n";
  out.precision(17);
  for (std::size_t r = 0; r < grid.height; ++r)
    for (std::size_t c = 0; c < grid.width; ++c) {
      const auto uv = cell_coords(grid, r, c);
      const GridCell& cell = grid.at(r, c);
      out << r << ',' << c << ',' << uv[0] << ',' << uv[1] << ',' << cell.class_index << ',' << cell.confidence << ','
          << cell.value << '\n';
    }
}

void write_grid_csv(const GridRender& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_grid_csv(grid, out);
}

void write_grid_ppm(const GridRender& grid, std::ostream& out) {
  out << "P6\n" << grid.width << ' ' << grid.height << "\n255\n";
  double vmax = 0.0;
  for (const GridCell& c : grid.cells) vmax = std::max(vmax, std::abs(c.value));
  auto byte = [](double v) { return static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)))); };
  // Image rows run top-down, grid rows bottom-up.
  for (std::size_t ir = 0; ir < grid.height; ++ir) {
    const std::size_t r = grid.height - 1 - ir;
    for (std::size_t c = 0; c < grid.width; ++c) {
      const GridCell& cell = grid.at(r, c);
      double rgb[3];
      if (grid.classes > 0) {
        const double floor = 1.0 / static_cast<double>(grid.classes);
        const double t = std::clamp((cell.confidence - floor) / (1.0 - floor), 0.0, 1.0);
        const auto col = class_color(cell.class_index);
        for (int k = 0; k < 3; ++k) rgb[k] = col[static_cast<std::size_t>(k)] * t;
      } else {
        const double t = vmax > 0 ? cell.value / vmax : 0.0;
        if (t >= 0) {
          rgb[0] = 255;
          rgb[1] = rgb[2] = 255 * (1 - t);
        } else {
          rgb[2] = 255;
          rgb[0] = rgb[1] = 255 * (1 + t);
        }
      }
      for (double v : rgb) out.put(byte(v));
    }
  }
}

void write_grid_ppm(const GridRender& grid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_grid_ppm(grid, out);
}

}  // namespace fgn
