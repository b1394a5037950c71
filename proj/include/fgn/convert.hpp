#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "fgn/layers.hpp"

namespace fgn {

inline constexpr std::size_t kMaxSigmaDoublings = 64;
inline constexpr std::size_t kDefaultReferenceSize = 5000;
inline constexpr int kMaxConversionAttempts = 12;

/// Orthogonal projection of the origin onto {x : w.x + b = 0}.
std::vector<double> center_from_neuron(std::span<const double> w, double b);

/// Converted copies with identical weights and bias, centers on each neuron's
/// zero hyperplane and one shared spherical sigma. Dense layers come out in
/// coupled mode.
FgnDenseLayer to_fgn(const DenseLayer& layer, double sigma);
FgnConv1dLayer to_fgn(const Conv1dLayer& layer, double sigma);

struct SigmaProbe {
  double sigma;
  double deviation;
};

struct SigmaSearch {
  double sigma = 0.0;
  double deviation = 0.0;
  std::vector<SigmaProbe> probes;
};

/// Max absolute logit difference between two networks over `inputs`.
double max_logit_deviation(const Network& a, const Network& b, const Tensor& inputs);

/// Thrown when no sigma up to 2^63 reaches the tolerance.
class ConversionError : public std::runtime_error {
 public:
  ConversionError(const std::string& what, double best_deviation)
      : std::runtime_error(what), best_deviation_(best_deviation) {}
  double best_deviation() const { return best_deviation_; }

 private:
  double best_deviation_;
};

/// Doubling search from sigma = 1 for layer `layer` of `partial`, which must
/// still be classical there. Earlier layers may already be converted. Returns
/// the first sigma whose network deviation from `reference` is <= tol.
SigmaSearch find_variance(const Network& reference, const Network& partial, std::size_t layer,
                          const Tensor& inputs, double tol);

struct ConversionReport {
  std::vector<double> layer_sigma;
  double max_deviation = 0.0;
  std::size_t search_iterations = 0;
  double argmax_agreement = 0.0;
  /// Whether any layer's probe sequence saw deviation increase with sigma.
  bool monotone = true;
  std::vector<std::vector<SigmaProbe>> probes;
};

struct ConversionResult {
  Network network;
  ConversionReport report;
};

/// Converts every classical layer in order. Rejects networks that already
/// contain FGN layers.
ConversionResult convert_network(const Network& classical, const Tensor& inputs, double tol);

/// Switches coupled FGN layers to an independent bias equal to -W.c, which
/// leaves outputs unchanged.
void decouple(Network& net);

}  // namespace fgn
