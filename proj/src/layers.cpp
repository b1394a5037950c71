#include "fgn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fgn {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity" || name == "linear") return Activation::Identity;
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

double activate(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return x;
    case Activation::Tanh: return std::tanh(x);
    case Activation::Relu: return x > 0 ? x : 0.0;
  }
  return x;
}

DenseLayer::DenseLayer(Tensor w, Tensor b, Activation act)
    : weights(std::move(w)), bias(std::move(b)), activation(act) {
  if (weights.rank() != 2 || bias.rank() != 1 || bias.size() != weights.shape[0]) {
    throw std::invalid_argument("dense layer: weights " + shape_string(weights.shape) + " and bias " +
                                shape_string(bias.shape) + " disagree");
  }
}

FgnDenseLayer::FgnDenseLayer(Tensor w, Tensor b, Tensor c, Tensor sigma, Activation act)
    : weights(std::move(w)), bias(std::move(b)), centers(std::move(c)), variance(std::move(sigma)), activation(act) {
  validate();
}

void FgnDenseLayer::validate() const {
  if (weights.rank() != 2) throw std::invalid_argument("fgn layer: weights must be a matrix");
  const std::size_t out = weights.shape[0], in = weights.shape[1];
  if (bias.shape != Shape{out}) throw std::invalid_argument("fgn layer: bias must be [" + std::to_string(out) + "]");
  if (centers.shape != weights.shape) throw std::invalid_argument("fgn layer: centers must match weights");
  Shape expected;
  switch (variance_kind) {
    case VarianceKind::Spherical: expected = {out}; break;
    case VarianceKind::Diagonal: expected = {out, in}; break;
    case VarianceKind::Full: expected = {out, in, in}; break;
  }
  if (variance.shape != expected) {
    throw std::invalid_argument("fgn layer: variance must be " + shape_string(expected) + ", got " +
                                shape_string(variance.shape));
  }
  if (!(p_norm > 0)) throw std::invalid_argument("fgn layer: p-norm must be positive");
}

std::size_t conv_output_length(std::size_t n, std::size_t kernel, std::size_t stride, std::size_t dilation) {
  const std::size_t field = dilation * (kernel - 1) + 1;
  if (n < field || stride == 0) return 0;
  return 1 + (n - field) / stride;
}

bool is_fgn(const Layer& layer) {
  return std::holds_alternative<FgnDenseLayer>(layer) || std::holds_alternative<FgnConv1dLayer>(layer);
}

std::string layer_kind_name(const Layer& layer) {
  switch (layer.index()) {
    case 0: return "dense";
    case 1: return "fgn-dense";
    case 2: return "conv1d";
    case 3: return "fgn-conv1d";
  }
  return "?";
}

bool Network::has_fgn() const { return std::any_of(layers.begin(), layers.end(), is_fgn); }

namespace {

NodeId apply_activation(Graph& g, NodeId x, Activation a) {
  switch (a) {
    case Activation::Identity: return x;
    case Activation::Tanh: return g.tanh(x);
    case Activation::Relu: return g.relu(x);
  }
  return x;
}

NodeId add_param(Graph& g, NetworkGraph& ng, std::size_t layer, const Tensor& t, const std::string& role) {
  const NodeId id = g.parameter(t, "L" + std::to_string(layer) + "." + role);
  ng.params.push_back({id, layer, role});
  return id;
}

}  // namespace

NetworkGraph build_network_graph(Graph& graph, const Network& net, std::size_t batch, std::size_t input_dim) {
  NetworkGraph ng;
  ng.input = graph.input("x");
  NodeId x = graph.reshape(ng.input, {batch, input_dim});
  std::size_t width = input_dim;
  std::optional<NodeId> gate_node;

  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Layer& layer = net.layers[li];
    std::optional<NodeId> gauss;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      if (d->in_dim() != width) {
        throw std::invalid_argument("layer " + std::to_string(li) + " expects " + std::to_string(d->in_dim()) +
                                    " inputs, receives " + std::to_string(width));
      }
      const NodeId w = add_param(graph, ng, li, d->weights, "weights");
      const NodeId b = add_param(graph, ng, li, d->bias, "bias");
      x = apply_activation(graph, graph.add_row(graph.matmul(x, w, true), b), d->activation);
      width = d->out_dim();
    } else if (const auto* f = std::get_if<FgnDenseLayer>(&layer)) {
      f->validate();
      if (f->in_dim() != width) {
        throw std::invalid_argument("layer " + std::to_string(li) + " expects " + std::to_string(f->in_dim()) +
                                    " inputs, receives " + std::to_string(width));
      }
      const NodeId w = add_param(graph, ng, li, f->weights, "weights");
      const NodeId c = add_param(graph, ng, li, f->centers, "centers");
      const NodeId v = add_param(graph, ng, li, f->variance, "variance");
      NodeId offset;
      if (f->coupled) {
        offset = graph.scale(graph.row_sum(graph.mul(w, c)), -1.0);
      } else {
        offset = add_param(graph, ng, li, f->bias, "bias");
      }
      const NodeId linear = graph.add_row(graph.matmul(x, w, true), offset);
      NodeId q = 0;
      switch (f->variance_kind) {
        case VarianceKind::Spherical: {
          const NodeId var = graph.add_const(graph.square(v), kVarianceFloor);
          q = graph.div_row(graph.pow_dist(x, c, f->p_norm), var);
          break;
        }
        case VarianceKind::Diagonal: q = graph.weighted_pow_dist(x, c, v, f->p_norm); break;
        case VarianceKind::Full: q = graph.mahalanobis(x, c, v); break;
      }
      NodeId gcomp = graph.gaussian(q);
      if (gate_node && net.use_gate) gcomp = graph.mul_col(gcomp, *gate_node);
      x = graph.mul(apply_activation(graph, linear, f->activation), gcomp);
      gauss = gcomp;
      gate_node = graph.row_max(gcomp);
      width = f->out_dim();
    } else if (const auto* cv = std::get_if<Conv1dLayer>(&layer)) {
      const std::size_t len = conv_output_length(width, cv->kernel(), cv->stride, cv->dilation);
      if (len == 0) throw std::invalid_argument("layer " + std::to_string(li) + ": input shorter than receptive field");
      const NodeId w = add_param(graph, ng, li, cv->weights, "weights");
      const NodeId b = add_param(graph, ng, li, cv->bias, "bias");
      const NodeId patches = graph.unfold1d(x, cv->kernel(), cv->stride, cv->dilation);
      const NodeId y = apply_activation(graph, graph.add_row(graph.matmul(patches, w, true), b), cv->activation);
      x = graph.channel_major(y, batch);
      width = cv->channels() * len;
    } else {
      const auto& fc = std::get<FgnConv1dLayer>(layer);
      const std::size_t len = conv_output_length(width, fc.kernel(), fc.stride, fc.dilation);
      if (len == 0) throw std::invalid_argument("layer " + std::to_string(li) + ": input shorter than receptive field");
      const NodeId w = add_param(graph, ng, li, fc.weights, "weights");
      const NodeId b = add_param(graph, ng, li, fc.bias, "bias");
      const NodeId c = add_param(graph, ng, li, fc.centers, "centers");
      const NodeId v = add_param(graph, ng, li, fc.sigma, "variance");
      const NodeId patches = graph.unfold1d(x, fc.kernel(), fc.stride, fc.dilation);
      const NodeId linear = graph.add_row(graph.matmul(patches, w, true), b);
      const NodeId var = graph.add_const(graph.square(v), kVarianceFloor);
      NodeId gcomp = graph.gaussian(graph.div_row(graph.pow_dist(patches, c, 2.0), var));
      if (gate_node && net.use_gate) gcomp = graph.mul_col(gcomp, graph.repeat_col(*gate_node, len));
      const NodeId y = graph.mul(apply_activation(graph, linear, fc.activation), gcomp);
      x = graph.channel_major(y, batch);
      const NodeId gmap = graph.channel_major(gcomp, batch);
      gauss = gmap;
      gate_node = graph.row_max(gmap);
      width = fc.channels() * len;
    }
    ng.gaussians.push_back(gauss);
  }
  ng.logits = x;
  ng.final_gate = gate_node;
  return ng;
}

Tensor& param_tensor(Network& net, const ParamRef& ref) {
  Layer& layer = net.layers.at(ref.layer);
  return std::visit(
      [&](auto& l) -> Tensor& {
        using T = std::decay_t<decltype(l)>;
        if (ref.role == "weights") return l.weights;
        if (ref.role == "bias") return l.bias;
        if constexpr (std::is_same_v<T, FgnDenseLayer>) {
          if (ref.role == "centers") return l.centers;
          if (ref.role == "variance") return l.variance;
        } else if constexpr (std::is_same_v<T, FgnConv1dLayer>) {
          if (ref.role == "centers") return l.centers;
          if (ref.role == "variance") return l.sigma;
        }
        throw std::invalid_argument("layer " + std::to_string(ref.layer) + " has no parameter '" + ref.role + "'");
      },
      layer);
}

BatchOutput forward_batch(const Network& net, const Tensor& inputs) {
  if (inputs.rank() != 2) throw std::invalid_argument("forward_batch expects a [B x D] batch");
  Graph graph;
  const NetworkGraph ng = build_network_graph(graph, net, inputs.shape[0], inputs.shape[1]);
  graph.forward({{ng.input, inputs}});
  BatchOutput out;
  out.logits = graph.value(ng.logits);
  out.final_gate = ng.final_gate ? graph.value(*ng.final_gate) : Tensor(Shape{inputs.shape[0]}, 1.0);
  for (const auto& g : ng.gaussians) {
    out.gaussians.push_back(g ? std::optional<Tensor>(graph.value(*g)) : std::nullopt);
  }
  return out;
}

Tensor predict_logits(const Network& net, const Tensor& inputs) { return forward_batch(net, inputs).logits; }

namespace {

Tensor row_batch(std::span<const double> x) { return Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())); }

void require_finite(std::span<const double> x, const char* what) {
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite input");
  }
}

}  // namespace

std::vector<double> dense_forward(const DenseLayer& layer, std::span<const double> x) {
  if (x.size() != layer.in_dim()) {
    throw std::invalid_argument("dense layer expects " + std::to_string(layer.in_dim()) + " inputs, got " +
                                std::to_string(x.size()));
  }
  Network net;
  net.layers.emplace_back(layer);
  return predict_logits(net, row_batch(x)).data;
}

FgnOutput fgn_dense_forward(const FgnDenseLayer& layer, std::span<const double> x, double gate_in) {
  if (x.size() != layer.in_dim()) {
    throw std::invalid_argument("fgn layer expects " + std::to_string(layer.in_dim()) + " inputs, got " +
                                std::to_string(x.size()));
  }
  if (!(gate_in >= 0.0 && gate_in <= 1.0)) throw std::invalid_argument("gate input must lie in [0,1]");
  Graph graph;
  Network net;
  net.layers.emplace_back(layer);
  const NetworkGraph ng = build_network_graph(graph, net, 1, x.size());
  graph.forward({{ng.input, row_batch(x)}});
  FgnOutput out;
  out.y = graph.value(ng.logits).data;
  out.g = graph.value(*ng.gaussians[0]).data;
  for (std::size_t i = 0; i < out.y.size(); ++i) {
    out.y[i] *= gate_in;
    out.g[i] *= gate_in;
  }
  return out;
}

double gaussian_component(std::span<const double> x, std::span<const double> center, VarianceKind kind,
                          std::span<const double> variance, double p_norm) {
  if (x.size() != center.size()) throw std::invalid_argument("gaussian component: input and center dims differ");
  require_finite(x, "gaussian component");
  const std::size_t dim = x.size();
  double q = 0;
  switch (kind) {
    case VarianceKind::Spherical: {
      if (variance.size() != 1) throw std::invalid_argument("spherical variance takes one value");
      for (std::size_t i = 0; i < dim; ++i) q += std::pow(std::abs(x[i] - center[i]), p_norm);
      q /= variance[0] * variance[0] + kVarianceFloor;
      break;
    }
    case VarianceKind::Diagonal: {
      if (variance.size() != dim) throw std::invalid_argument("diagonal variance takes one value per input");
      for (std::size_t i = 0; i < dim; ++i) {
        q += std::pow(std::abs(x[i] - center[i]), p_norm) / (variance[i] * variance[i] + kVarianceFloor);
      }
      break;
    }
    case VarianceKind::Full: {
      if (variance.size() != dim * dim) throw std::invalid_argument("full covariance takes a dim x dim factor");
      Graph graph;
      const NodeId xn = graph.constant(Tensor(Shape{1, dim}, std::vector<double>(x.begin(), x.end())));
      const NodeId cn = graph.constant(Tensor(Shape{1, dim}, std::vector<double>(center.begin(), center.end())));
      const NodeId ln = graph.constant(Tensor(Shape{1, dim, dim}, std::vector<double>(variance.begin(), variance.end())));
      const NodeId qn = graph.mahalanobis(xn, cn, ln);
      graph.forward();
      q = graph.value(qn).item();
      break;
    }
  }
  return q > kGaussianCutoff ? 0.0 : std::exp(-q);
}

double gate(std::span<const double> previous) {
  if (previous.empty()) return 1.0;
  return *std::max_element(previous.begin(), previous.end());
}

Tensor conv1d_forward(const Conv1dLayer& layer, std::span<const double> x) {
  const std::size_t len = conv_output_length(x.size(), layer.kernel(), layer.stride, layer.dilation);
  if (len == 0) throw std::invalid_argument("conv1d: input shorter than receptive field");
  Network net;
  net.layers.emplace_back(layer);
  Tensor y = predict_logits(net, row_batch(x));
  return Tensor(Shape{layer.channels(), len}, std::move(y.data));
}

Tensor conv1d_forward(const FgnConv1dLayer& layer, std::span<const double> x, double gate_in, Tensor* g) {
  const std::size_t len = conv_output_length(x.size(), layer.kernel(), layer.stride, layer.dilation);
  if (len == 0) throw std::invalid_argument("conv1d: input shorter than receptive field");
  if (!(gate_in >= 0.0 && gate_in <= 1.0)) throw std::invalid_argument("gate input must lie in [0,1]");
  Network net;
  net.layers.emplace_back(layer);
  BatchOutput out = forward_batch(net, row_batch(x));
  Tensor y(Shape{layer.channels(), len}, std::move(out.logits.data));
  for (double& v : y.data) v *= gate_in;
  if (g) {
    *g = Tensor(Shape{layer.channels(), len}, std::move(out.gaussians[0]->data));
    for (double& v : g->data) v *= gate_in;
  }
  return y;
}

NetworkOutput network_forward(const Network& net, std::span<const double> x) {
  BatchOutput out = forward_batch(net, row_batch(x));
  return {std::move(out.logits.data), out.final_gate[0]};
}

std::size_t network_input_dim(const Network& net) {
  if (net.layers.empty()) return 0;
  return std::visit(
      [](const auto& l) -> std::size_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, DenseLayer> || std::is_same_v<T, FgnDenseLayer>) {
          return l.in_dim();
        } else {
          return 0;
        }
      },
      net.layers.front());
}

std::size_t network_output_dim(const Network& net, std::size_t input_dim) {
  std::size_t width = input_dim;
  for (const Layer& layer : net.layers) {
    width = std::visit(
        [&](const auto& l) -> std::size_t {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, DenseLayer> || std::is_same_v<T, FgnDenseLayer>) {
            return l.out_dim();
          } else {
            return l.channels() * conv_output_length(width, l.kernel(), l.stride, l.dilation);
          }
        },
        layer);
  }
  return width;
}

}  // namespace fgn
