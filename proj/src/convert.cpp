#include "fgn/convert.hpp"

#include <cmath>
#include <sstream>
#include <limits>
#include <string>

namespace fgn {

std::vector<double> center_from_neuron(std::span<const double> w, double b) {
  double norm2 = 0.0;
  for (double v : w) norm2 += v * v;
  if (!(norm2 > 0.0)) throw std::invalid_argument("center_from_neuron: zero weight vector has no zero line");
  std::vector<double> c(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) c[i] = -b * w[i] / norm2;
  return c;
}

namespace {

Tensor centers_for(const Tensor& weights, const Tensor& bias) {
  const std::size_t rows = weights.shape.at(0), cols = weights.shape.at(1);
  Tensor centers(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const auto c = center_from_neuron({weights.data.data() + r * cols, cols}, bias[r]);
    std::copy(c.begin(), c.end(), centers.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return centers;
}

Network with_layer_converted(const Network& net, std::size_t index, double sigma) {
  Network out = net;
  out.layers[index] = std::visit(
      [&](const auto& l) -> Layer {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, DenseLayer> || std::is_same_v<T, Conv1dLayer>) {
          return to_fgn(l, sigma);
        } else {
          throw std::invalid_argument("layer " + std::to_string(index) + " (" + layer_kind_name(l) +
                                      ") is not a classical layer");
        }
      },
      net.layers.at(index));
  return out;
}

std::size_t argmax(const Tensor& logits, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.cols(); ++k)
    if (logits.at(row, k) > logits.at(row, best)) best = k;
  return best;
}

}  // namespace

FgnDenseLayer to_fgn(const DenseLayer& layer, double sigma) {
  FgnDenseLayer f(layer.weights, layer.bias, centers_for(layer.weights, layer.bias), Tensor(Shape{layer.out_dim()}, sigma),
                  layer.activation);
  f.coupled = true;
  return f;
}

FgnConv1dLayer to_fgn(const Conv1dLayer& layer, double sigma) {
  FgnConv1dLayer f;
  f.weights = layer.weights;
  f.bias = layer.bias;
  f.centers = centers_for(layer.weights, layer.bias);
  f.sigma = Tensor(Shape{layer.channels()}, sigma);
  f.stride = layer.stride;
  f.dilation = layer.dilation;
  f.activation = layer.activation;
  return f;
}

double max_logit_deviation(const Network& a, const Network& b, const Tensor& inputs) {
  const Tensor ya = predict_logits(a, inputs);
  const Tensor yb = predict_logits(b, inputs);
  double worst = 0.0;
  for (std::size_t i = 0; i < ya.size(); ++i) {
    const double d = std::abs(ya[i] - yb[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, d);
  }
  return worst;
}

SigmaSearch find_variance(const Network& reference, const Network& partial, std::size_t layer,
                          const Tensor& inputs, double tol) {
  if (inputs.rows() == 0 || inputs.size() == 0) throw std::invalid_argument("find_variance: no reference inputs");
  if (!(tol > 0)) throw std::invalid_argument("find_variance: tolerance must be positive");
  SigmaSearch search;
  double best = std::numeric_limits<double>::infinity();
  double sigma = 1.0;
  for (std::size_t it = 0; it < kMaxSigmaDoublings; ++it, sigma *= 2.0) {
    const double dev = max_logit_deviation(reference, with_layer_converted(partial, layer, sigma), inputs);
    search.probes.push_back({sigma, dev});
    best = std::min(best, dev);
    if (dev <= tol) {
      search.sigma = sigma;
      search.deviation = dev;
      return search;
    }
  }
  std::ostringstream msg;
  msg << "layer " << layer << ": no sigma up to 2^63 reaches tolerance " << tol << " (best deviation " << best << ")";
  throw ConversionError(msg.str(),
                        best);
}

ConversionResult convert_network(const Network& classical, const Tensor& inputs, double tol) {
  for (std::size_t i = 0; i < classical.layers.size(); ++i)
    if (is_fgn(classical.layers[i]))
      throw std::invalid_argument("layer " + std::to_string(i) + " (" + layer_kind_name(classical.layers[i]) +
                                  ") is already an FGN layer");
  if (classical.layers.empty()) throw std::invalid_argument("convert_network: empty network");

  // Layer i must keep the whole network within tol * (i + 1) / L, so early
  // layers cannot spend the budget of later ones. A converted layer is scaled
  // by the gate of the layer before it, so when layer k cannot fit even at
  // huge sigma, the budgets of layers < k are tightened and the search reruns.
  const std::size_t n = classical.layers.size();
  std::vector<double> scale(n, 1.0);
  ConversionResult result;
  Network current;
  for (int attempt = 0;; ++attempt) {
    result.report = {};
    current = classical;
    std::size_t i = 0;
    try {
      for (; i < n; ++i) {
        const double target =
            i + 1 == n ? tol : tol * scale[i] * static_cast<double>(i + 1) / static_cast<double>(n);
        SigmaSearch s = find_variance(classical, current, i, inputs, target);
        current = with_layer_converted(current, i, s.sigma);
        result.report.layer_sigma.push_back(s.sigma);
        result.report.search_iterations += s.probes.size();
        for (std::size_t k = 1; k < s.probes.size(); ++k)
          if (s.probes[k].deviation > s.probes[k - 1].deviation) result.report.monotone = false;
        result.report.probes.push_back(std::move(s.probes));
      }
      break;
    } catch (const ConversionError&) {
      if (i == 0 || attempt + 1 == kMaxConversionAttempts) throw;
      for (std::size_t k = 0; k < i; ++k) scale[k] *= 0.25;
    }
  }

  const Tensor yc = predict_logits(classical, inputs);
  const Tensor yf = predict_logits(current, inputs);
  std::size_t agree = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < yc.size(); ++i) worst = std::max(worst, std::abs(yc[i] - yf[i]));
  for (std::size_t r = 0; r < yc.rows(); ++r) agree += argmax(yc, r) == argmax(yf, r);
  result.report.max_deviation = worst;
  result.report.argmax_agreement = static_cast<double>(agree) / static_cast<double>(yc.rows());
  result.network = std::move(current);
  return result;
}

void decouple(Network& net) {
  for (Layer& layer : net.layers) {
    if (auto* f = std::get_if<FgnDenseLayer>(&layer); f && f->coupled) {
      const std::size_t in = f->in_dim();
      for (std::size_t r = 0; r < f->out_dim(); ++r) {
        double wc = 0.0;
        for (std::size_t j = 0; j < in; ++j) wc += f->weights.at(r, j) * f->centers.at(r, j);
        f->bias[r] = -wc;
      }
      f->coupled = false;
    }
  }
}

}  // namespace fgn
