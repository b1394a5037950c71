#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fgn/autodiff.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

enum class Activation : std::uint8_t { Identity = 0, Tanh = 1, Relu = 2 };

enum class VarianceKind : std::uint8_t { Spherical = 1, Diagonal = 2, Full = 3 };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& name);
double activate(Activation a, double x);

/// y = phi(W x + b).
struct DenseLayer {
  Tensor weights;  // [out x in]
  Tensor bias;     // [out]
  Activation activation = Activation::Tanh;

  DenseLayer() = default;
  DenseLayer(Tensor w, Tensor b, Activation act);
  std::size_t in_dim() const { return weights.shape.at(1); }
  std::size_t out_dim() const { return weights.shape.at(0); }
};

/// Finite Gaussian neurons: y = phi(W x + b) * g, g = gate * exp(-q(x - c)).
///
/// q is |x - c|_p^p / sigma^2 for spherical variance (one raw sigma per
/// neuron), sum_d |x_d - c_d|^p / sigma_d^2 for diagonal variance, and
/// (x - c)^T (L L^T)^{-1} (x - c) for full covariance. Raw variance values
/// are squared and floored before use, so any real raw value is valid.
///
/// In coupled mode the bias is not a free parameter: l = W (x - c), which
/// keeps the zero-output hyperplane through the center.
struct FgnDenseLayer {
  Tensor weights;   // [out x in]
  Tensor bias;      // [out]
  Tensor centers;   // [out x in]
  VarianceKind variance_kind = VarianceKind::Spherical;
  Tensor variance;  // [out] | [out x in] | [out x in x in]
  double p_norm = 2.0;
  Activation activation = Activation::Tanh;
  bool coupled = false;

  FgnDenseLayer() = default;
  FgnDenseLayer(Tensor w, Tensor b, Tensor c, Tensor sigma, Activation act);
  std::size_t in_dim() const { return weights.shape.at(1); }
  std::size_t out_dim() const { return weights.shape.at(0); }
  void validate() const;
};

/// Single-input-channel 1-D convolution, one kernel per output channel.
struct Conv1dLayer {
  Tensor weights;  // [channels x kernel]
  Tensor bias;     // [channels]
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Activation activation = Activation::Relu;

  std::size_t channels() const { return weights.shape.at(0); }
  std::size_t kernel() const { return weights.shape.at(1); }
};

struct FgnConv1dLayer {
  Tensor weights;  // [channels x kernel]
  Tensor bias;     // [channels]
  Tensor centers;  // [channels x kernel]
  Tensor sigma;    // [channels], raw
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Activation activation = Activation::Relu;

  std::size_t channels() const { return weights.shape.at(0); }
  std::size_t kernel() const { return weights.shape.at(1); }
};

/// floor(1 + (n - d(k-1) - 1) / s); 0 when the input is shorter than the field.
std::size_t conv_output_length(std::size_t n, std::size_t kernel, std::size_t stride, std::size_t dilation);

using Layer = std::variant<DenseLayer, FgnDenseLayer, Conv1dLayer, FgnConv1dLayer>;

bool is_fgn(const Layer& layer);
std::string layer_kind_name(const Layer& layer);

struct Network {
  std::vector<Layer> layers;
  /// When false, FGN layers ignore the previous layer's Gaussian components
  /// (the gateless ablation).
  bool use_gate = true;

  bool has_fgn() const;
};

/// Which tensor of which layer a graph parameter leaf mirrors.
struct ParamRef {
  NodeId node;
  std::size_t layer;
  std::string role;  // "weights", "bias", "centers", "variance"
};

struct NetworkGraph {
  NodeId input = 0;
  NodeId logits = 0;
  /// Per layer: Gaussian component map [B x units] for FGN layers, nullopt for
  /// classical layers.
  std::vector<std::optional<NodeId>> gaussians;
  /// Per-sample gate leaving the last layer, nullopt if no FGN layer ran.
  std::optional<NodeId> final_gate;
  std::vector<ParamRef> params;
};

/// Appends the network to `graph` for a batch of `batch` inputs of width
/// `input_dim`. Parameters become bound leaves holding copies of the layer
/// tensors.
NetworkGraph build_network_graph(Graph& graph, const Network& net, std::size_t batch, std::size_t input_dim);

/// Mutable access to the tensor a ParamRef mirrors.
Tensor& param_tensor(Network& net, const ParamRef& ref);

struct BatchOutput {
  Tensor logits;                      // [B x K]
  Tensor final_gate;                  // [B], ones when the network has no FGN layer
  std::vector<std::optional<Tensor>> gaussians;
};

/// Forward pass over a [B x D] batch.
BatchOutput forward_batch(const Network& net, const Tensor& inputs);
Tensor predict_logits(const Network& net, const Tensor& inputs);

// Single-input conveniences.

std::vector<double> dense_forward(const DenseLayer& layer, std::span<const double> x);

struct FgnOutput {
  std::vector<double> y;
  std::vector<double> g;
};
FgnOutput fgn_dense_forward(const FgnDenseLayer& layer, std::span<const double> x, double gate_in = 1.0);

/// Gaussian component of one neuron. `variance` holds that neuron's raw
/// variance parameters: 1 value (spherical), `dim` values (diagonal) or a
/// dim x dim lower-triangular factor (full).
double gaussian_component(std::span<const double> x, std::span<const double> center, VarianceKind kind,
                          std::span<const double> variance, double p_norm = 2.0);

/// Max of the previous layer's Gaussian components; 1 for the first layer.
double gate(std::span<const double> previous);

/// Classical conv: [channels x outLen]. FGN conv also fills `g` when given.
Tensor conv1d_forward(const Conv1dLayer& layer, std::span<const double> x);
Tensor conv1d_forward(const FgnConv1dLayer& layer, std::span<const double> x, double gate_in = 1.0, Tensor* g = nullptr);

struct NetworkOutput {
  std::vector<double> logits;
  double final_gate = 1.0;
};
NetworkOutput network_forward(const Network& net, std::span<const double> x);

/// Input width expected by the first layer (conv layers accept any length
/// that chains; returns 0 for them).
std::size_t network_input_dim(const Network& net);
std::size_t network_output_dim(const Network& net, std::size_t input_dim);

}  // namespace fgn
