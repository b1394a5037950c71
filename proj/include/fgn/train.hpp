#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgn/data.hpp"
#include "fgn/layers.hpp"

namespace fgn {

enum class LossKind { Mse, CrossEntropy };
enum class OptimizerKind { Sgd, Adam };

LossKind parse_loss(const std::string& name);
OptimizerKind parse_optimizer(const std::string& name);
const char* loss_name(LossKind k);
const char* optimizer_name(OptimizerKind k);

struct TrainConfig {
  LossKind loss = LossKind::CrossEntropy;
  double lambda = 0.0;     // weight of the sum of FGN variances
  double l2_weight = 0.0;  // weight of the sum of squared weights
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Parameter roles left untouched by the optimizer ("weights", "bias",
  /// "centers", "variance").
  std::set<std::string> frozen;

  void validate() const;
};

/// Appends the base loss for `logits` [B x K]. Cross-entropy is the mean NLL
/// of log-softmax. MSE is the per-sample sum of squared errors averaged over
/// the batch; targets are one-hot for K >= 2 and -1/+1 for a single output.
NodeId base_loss(Graph& g, NodeId logits, const std::vector<std::size_t>& labels, std::size_t outputs, LossKind kind);

/// base + lambda * sum of sigma^2 over every FGN layer (diagonal: all
/// per-dimension values; full: trace(L L^T)) + l2 * sum of squared weights.
NodeId regularized_loss(Graph& g, NodeId base, const NetworkGraph& ng, const Network& net, double lambda,
                        double l2_weight = 0.0);

/// Value of the variance penalty sum without building a graph.
double variance_penalty(const Network& net);

/// Predicted class: argmax for K >= 2, y > 0 for a single output.
std::size_t predicted_class(std::span<const double> logits);
double accuracy(const Network& net, const Dataset& ds);

struct InitScheme {
  enum class Kind { FromData, LargeSigma } kind = Kind::LargeSigma;
  double sigma = 1e6;
};

/// FromData: centers become randomly chosen rows of `points` (with
/// replacement only when there are fewer points than neurons). Both schemes
/// then widen sigma where needed so each neuron has g >= 0.5 on at least one
/// row of `points`; LargeSigma first sets every sigma to `scheme.sigma`.
void init_fgn_layer(FgnDenseLayer& layer, const InitScheme& scheme, const Tensor& points, std::uint64_t seed);

/// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases. FGN layers get zero
/// centers and spherical sigma `fgn_sigma`.
Network make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t outputs,
                 Activation hidden_activation, bool fgn, std::uint64_t seed, double fgn_sigma = 1.0);

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg);
  /// Applies one update from leaf gradients keyed by the refs' nodes.
  void step(Network& net, const std::vector<ParamRef>& refs, const std::map<NodeId, Tensor>& grads);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct SigmaStats {
  std::size_t layer;
  double min, median, max;  // of sigma^2 (floored) over the layer's variances
};

struct EpochStats {
  std::size_t epoch;
  double loss;
  double accuracy;
  std::vector<SigmaStats> sigma;
};

using TrainHistory = std::vector<EpochStats>;

std::vector<SigmaStats> sigma_stats(const Network& net);

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

/// Minibatch training. Throws TrainingError on a non-finite loss.
TrainHistory train(Network& net, const Dataset& data, const TrainConfig& cfg);

/// epoch,loss,accuracy,sigma_min,sigma_med,sigma_max. Sigma columns are taken
/// across all FGN layers and are empty for classical networks.
void write_history_csv(const TrainHistory& history, std::ostream& out);
void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);

}  // namespace fgn
