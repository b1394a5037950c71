#include "fgn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "fgn/rng.hpp"

namespace fgn {

LossKind parse_loss(const std::string& name) {
  if (name == "mse") return LossKind::Mse;
  if (name == "cross-entropy" || name == "ce") return LossKind::CrossEntropy;
  throw std::invalid_argument("unknown loss '" + name + "'");
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

const char* loss_name(LossKind k) { return k == LossKind::Mse ? "mse" : "cross-entropy"; }
const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  if (!(lambda >= 0)) throw std::invalid_argument("lambda must be non-negative");
  if (!(l2_weight >= 0)) throw std::invalid_argument("l2 weight must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("adam betas must lie in [0,1)");
  if (!(epsilon > 0)) throw std::invalid_argument("adam epsilon must be positive");
  for (const auto& r : frozen)
    if (r != "weights" && r != "bias" && r != "centers" && r != "variance")
      throw std::invalid_argument("unknown parameter role '" + r + "'");
}

NodeId base_loss(Graph& g, NodeId logits, const std::vector<std::size_t>& labels, std::size_t outputs, LossKind kind) {
  const std::size_t batch = labels.size();
  if (kind == LossKind::CrossEntropy) {
    if (outputs < 2) throw std::invalid_argument("cross-entropy needs at least 2 outputs");
    return g.nll(g.log_softmax(logits), labels);
  }
  Tensor target(Shape{batch, outputs});
  for (std::size_t i = 0; i < batch; ++i) {
    if (outputs == 1) {
      target[i] = labels[i] == 0 ? -1.0 : 1.0;
    } else {
      if (labels[i] >= outputs) throw std::invalid_argument("label exceeds network outputs");
      target.at(i, labels[i]) = 1.0;
    }
  }
  const NodeId diff = g.sub(logits, g.constant(std::move(target), "target"));
  return g.scale(g.sum(g.square(diff)), 1.0 / static_cast<double>(batch));
}

NodeId regularized_loss(Graph& g, NodeId base, const NetworkGraph& ng, const Network& net, double lambda,
                        double l2_weight) {
  if (!(lambda >= 0)) throw std::invalid_argument("lambda must be non-negative");
  NodeId total = base;
  for (const ParamRef& p : ng.params) {
    const bool fgn_layer = is_fgn(net.layers.at(p.layer));
    if (lambda > 0 && fgn_layer && p.role == "variance") total = g.add(total, g.scale(g.sum(g.square(p.node)), lambda));
    if (l2_weight > 0 && p.role == "weights") total = g.add(total, g.scale(g.sum(g.square(p.node)), l2_weight));
  }
  return total;
}

double variance_penalty(const Network& net) {
  double s = 0.0;
  for (const Layer& layer : net.layers) {
    if (const auto* f = std::get_if<FgnDenseLayer>(&layer)) {
      for (double v : f->variance.data) s += v * v;
    } else if (const auto* c = std::get_if<FgnConv1dLayer>(&layer)) {
      for (double v : c->sigma.data) s += v * v;
    }
  }
  return s;
}

std::size_t predicted_class(std::span<const double> logits) {
  if (logits.size() == 1) return logits[0] > 0.0 ? 1 : 0;
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double accuracy(const Network& net, const Dataset& ds) {
  const Tensor logits = predict_logits(net, ds.inputs);
  const std::size_t k = logits.cols();
  std::size_t right = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    right += predicted_class({logits.data.data() + i * k, k}) == ds.labels[i];
  return static_cast<double>(right) / static_cast<double>(ds.size());
}

void init_fgn_layer(FgnDenseLayer& layer, const InitScheme& scheme, const Tensor& points, std::uint64_t seed) {
  if (points.rank() != 2 || points.rows() == 0) throw std::invalid_argument("init_fgn_layer: no data points");
  if (points.cols() != layer.in_dim()) throw std::invalid_argument("init_fgn_layer: point width mismatch");
  if (layer.variance_kind != VarianceKind::Spherical)
    throw std::invalid_argument("init_fgn_layer: only spherical variance is initialized");
  const std::size_t n = points.rows(), dim = points.cols(), out = layer.out_dim();
  Rng rng(seed);
  if (scheme.kind == InitScheme::Kind::FromData) {
    std::vector<std::size_t> pick;
    if (n >= out) {
      pick = rng.permutation(n);
      pick.resize(out);
    } else {
      for (std::size_t i = 0; i < out; ++i) pick.push_back(rng.below(n));
    }
    for (std::size_t u = 0; u < out; ++u)
      for (std::size_t j = 0; j < dim; ++j) layer.centers.at(u, j) = points.at(pick[u], j);
  } else {
    if (!(scheme.sigma > 0)) throw std::invalid_argument("init_fgn_layer: sigma must be positive");
    std::fill(layer.variance.data.begin(), layer.variance.data.end(), scheme.sigma);
  }
  // exp(-d^p / sigma^2) >= 0.5 at the nearest point.
  for (std::size_t u = 0; u < out; ++u) {
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d += std::pow(std::abs(points.at(i, j) - layer.centers.at(u, j)), layer.p_norm);
      nearest = std::min(nearest, d);
    }
    const double needed = std::sqrt(nearest / std::log(2.0)) * (1.0 + 1e-9);
    layer.variance[u] = std::max(std::abs(layer.variance[u]), needed);
  }
}

Network make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t outputs,
                 Activation hidden_activation, bool fgn, std::uint64_t seed, double fgn_sigma) {
  Rng rng(seed);
  Network net;
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(outputs);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t in = dims[i], out = dims[i + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor w(Shape{out, in}), b(Shape{out});
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    for (double& v : b.data) v = rng.uniform(-bound, bound);
    const Activation act = i + 2 == dims.size() ? Activation::Identity : hidden_activation;
    if (fgn) {
      net.layers.emplace_back(FgnDenseLayer(std::move(w), std::move(b), Tensor(Shape{out, in}),
                                            Tensor(Shape{out}, fgn_sigma), act));
    } else {
      net.layers.emplace_back(DenseLayer(std::move(w), std::move(b), act));
    }
  }
  return net;
}

Optimizer::Optimizer(const TrainConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

void Optimizer::step(Network& net, const std::vector<ParamRef>& refs, const std::map<NodeId, Tensor>& grads) {
  if (m_.empty()) {
    for (const ParamRef& r : refs) {
      const std::size_t n = param_tensor(net, r).size();
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
  }
  if (m_.size() != refs.size()) throw std::invalid_argument("optimizer: parameter set changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (cfg_.frozen.count(refs[k].role)) continue;
    Tensor& p = param_tensor(net, refs[k]);
    const Tensor& g = grads.at(refs[k].node);
    if (g.size() != p.size()) throw std::invalid_argument("optimizer: gradient size mismatch");
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg_.lr * g[i];
      continue;
    }
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
      p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.epsilon);
    }
  }
}

std::vector<SigmaStats> sigma_stats(const Network& net) {
  std::vector<SigmaStats> out;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    std::vector<double> s2;
    if (const auto* f = std::get_if<FgnDenseLayer>(&net.layers[li])) {
      if (f->variance_kind == VarianceKind::Full) {
        // Per-neuron trace of L L^T.
        const std::size_t d = f->in_dim();
        for (std::size_t u = 0; u < f->out_dim(); ++u) {
          double tr = 0.0;
          for (std::size_t k = 0; k < d * d; ++k) tr += f->variance[u * d * d + k] * f->variance[u * d * d + k];
          s2.push_back(tr);
        }
      } else {
        for (double v : f->variance.data) s2.push_back(v * v + kVarianceFloor);
      }
    } else if (const auto* c = std::get_if<FgnConv1dLayer>(&net.layers[li])) {
      for (double v : c->sigma.data) s2.push_back(v * v + kVarianceFloor);
    } else {
      continue;
    }
    std::sort(s2.begin(), s2.end());
    const std::size_t n = s2.size();
    const double med = n % 2 ? s2[n / 2] : 0.5 * (s2[n / 2 - 1] + s2[n / 2]);
    out.push_back({li, s2.front(), med, s2.back()});
  }
  return out;
}

TrainHistory train(Network& net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  TrainHistory history;
  if (cfg.epochs == 0) return history;
  const std::size_t n = data.size(), dim = data.dim();
  const std::size_t outputs = network_output_dim(net, dim);
  if (outputs == 1 ? data.num_classes > 2 : outputs < data.num_classes)
    throw std::invalid_argument("network has " + std::to_string(outputs) + " outputs for " +
                                std::to_string(data.num_classes) + " classes");

  Rng rng(cfg.seed);
  Optimizer opt(cfg);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t right = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const std::size_t bs = std::min(cfg.batch_size, n - start);
      Tensor x(Shape{bs, dim});
      std::vector<std::size_t> labels(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t src = order[start + i];
        std::copy_n(data.inputs.data.begin() + static_cast<std::ptrdiff_t>(src * dim), dim,
                    x.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
        labels[i] = data.labels[src];
      }
      Graph g;
      const NetworkGraph ng = build_network_graph(g, net, bs, dim);
      const NodeId base = base_loss(g, ng.logits, labels, outputs, cfg.loss);
      const NodeId loss = regularized_loss(g, base, ng, net, cfg.lambda, cfg.l2_weight);
      g.forward({{ng.input, x}});
      const double value = g.value(loss).item();
      if (!std::isfinite(value))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index),
                            epoch, batch_index);
      const auto grads = g.backward(loss);
      for (const ParamRef& r : ng.params)
        for (double v : grads.at(r.node).data)
          if (!std::isfinite(v))
            throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index),
                                epoch, batch_index);
      const Tensor& logits = g.value(ng.logits);
      for (std::size_t i = 0; i < bs; ++i)
        right += predicted_class({logits.data.data() + i * outputs, outputs}) == labels[i];
      loss_sum += value * static_cast<double>(bs);
      opt.step(net, ng.params, grads);
    }
    history.push_back({epoch, loss_sum / static_cast<double>(n), static_cast<double>(right) / static_cast<double>(n),
                       sigma_stats(net)});
  }
  return history;
}

void write_history_csv(const TrainHistory& history, std::ostream& out) {
  out.precision(10);
  out << "epoch,loss,accuracy,sigma_min,sigma_med,sigma_max\n";
  for (const EpochStats& e : history) {
    out << e.epoch << ',' << e.loss << ',' << e.accuracy << ',';
    if (e.sigma.empty()) {
      out << ",,\n";
      continue;
    }
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    std::vector<double> meds;
    for (const SigmaStats& s : e.sigma) {
      lo = std::min(lo, s.min);
      hi = std::max(hi, s.max);
      meds.push_back(s.median);
    }
    std::sort(meds.begin(), meds.end());
    out << lo << ',' << meds[meds.size() / 2] << ',' << hi << '\n';
  }
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_history_csv(history, out);
}

}  // namespace fgn
