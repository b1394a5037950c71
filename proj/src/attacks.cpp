#include "fgn/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "fgn/autodiff.hpp"
#include "fgn/eval.hpp"
#include "fgn/parallel.hpp"

namespace fgn {

AttackKind parse_attack(const std::string& name) {
  if (name == "fgsm") return AttackKind::Fgsm;
  if (name == "pgd") return AttackKind::Pgd;
  if (name == "cw") return AttackKind::Cw;
  throw std::invalid_argument("unknown attack '" + name + "' (expected fgsm, pgd or cw)");
}

const char* attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::Cw: return "cw";
  }
  return "?";
}

void CwConfig::validate() const {
  if (!(eps_max > 0)) throw std::invalid_argument("cw eps_max must be positive");
  if (!(c_low > 0) || !(c_low < c_high)) throw std::invalid_argument("cw needs 0 < c_low < c_high");
  if (binary_steps < 1 || inner_iters < 1) throw std::invalid_argument("cw binary_steps and inner_iters must be >= 1");
  if (!(inner_lr > 0)) throw std::invalid_argument("cw inner_lr must be positive");
  if (!(box_lo < box_hi)) throw std::invalid_argument("cw box needs lo < hi");
}

void AttackConfig::validate() const {
  if (!(pgd_alpha_ratio > 0) || pgd_alpha_ratio > 1) throw std::invalid_argument("pgd alpha ratio must be in (0, 1]");
  if (pgd_steps < 1) throw std::invalid_argument("pgd steps must be >= 1");
  if (kind == AttackKind::Cw) cw.validate();
}

bool attack_succeeded(std::size_t label, std::size_t original_class, std::size_t adversarial_class,
                      double adversarial_confidence) {
  return original_class == label && adversarial_class != label && adversarial_confidence > 0.5;
}

Distortion distortion(std::span<const double> x, std::span<const double> adversarial) {
  if (x.size() != adversarial.size()) throw std::invalid_argument("distortion: size mismatch");
  Distortion d;
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = adversarial[i] - x[i];
    d.linf = std::max(d.linf, std::abs(diff));
    sq += diff * diff;
  }
  d.l2 = std::sqrt(sq);
  return d;
}

namespace {

double sign(double v) { return v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0; }

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

std::span<const double> row_of(const Tensor& t, std::size_t r) {
  return {t.data.data() + r * t.cols(), t.cols()};
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw std::invalid_argument("label exceeds network outputs");
    t.at(i, labels[i]) = 1.0;
  }
  return t;
}

std::size_t output_dim(const Network& net, std::size_t dim) {
  const std::size_t k = network_output_dim(net, dim);
  if (k < 2) throw std::invalid_argument("attacks need a network with at least 2 outputs");
  return k;
}

// Finishes an outcome from the original and adversarial logits.
void finish(AttackOutcome& o, std::size_t label, std::span<const double> x, std::span<const double> orig_logits,
            std::span<const double> adv_logits) {
  if (!all_finite(orig_logits) || !all_finite(adv_logits) || !all_finite(o.adversarial)) {
    o.failed = true;
    o.success = false;
    o.distortion = distortion(x, o.adversarial);
    return;
  }
  o.original_class = confidence(orig_logits).class_index;
  const Prediction p = confidence(adv_logits);
  o.adversarial_class = p.class_index;
  o.adversarial_confidence = p.confidence;
  o.distortion = distortion(x, o.adversarial);
  o.success = !o.failed && attack_succeeded(label, o.original_class, o.adversarial_class, o.adversarial_confidence);
}

void check_batch(const Tensor& inputs, const std::vector<std::size_t>& labels) {
  if (inputs.rank() != 2 || inputs.rows() != labels.size())
    throw std::invalid_argument("attack batch: inputs must be [B x D] with one label per row");
}

}  // namespace

double project_linf(double x, double proposal, double eps) {
  double v = x + std::clamp(proposal - x, -eps, eps);
  // x + d can round past the ball; step back toward x.
  while (v - x > eps) v = std::nextafter(v, x);
  while (x - v > eps) v = std::nextafter(v, x);
  return v;
}

struct LossGradient::Impl {
  Graph graph;
  NetworkGraph ng;
  NodeId target = 0;
  NodeId log_probs = 0;
  NodeId loss = 0;
  std::size_t batch = 0, dim = 0, classes = 0;
};

LossGradient::LossGradient(const Network& net, std::size_t batch, std::size_t dim) : impl_(std::make_unique<Impl>()) {
  Impl& m = *impl_;
  m.batch = batch;
  m.dim = dim;
  m.classes = output_dim(net, dim);
  m.ng = build_network_graph(m.graph, net, batch, dim);
  m.target = m.graph.input("target");
  m.log_probs = m.graph.log_softmax(m.ng.logits);
  m.loss = m.graph.scale(m.graph.sum(m.graph.mul(m.log_probs, m.target)), -1.0);
}

LossGradient::~LossGradient() = default;
LossGradient::LossGradient(LossGradient&&) noexcept = default;
LossGradient& LossGradient::operator=(LossGradient&&) noexcept = default;

std::vector<double> LossGradient::operator()(const Tensor& x, const std::vector<std::size_t>& labels, Tensor& grad,
                                             Tensor* logits) {
  Impl& m = *impl_;
  if (x.rank() != 2 || x.rows() != m.batch || x.cols() != m.dim || labels.size() != m.batch)
    throw std::invalid_argument("LossGradient: batch shape mismatch");
  m.graph.forward({{m.ng.input, x}, {m.target, one_hot(labels, m.classes)}});
  m.graph.backward(m.loss);
  grad = m.graph.grad(m.ng.input);
  const Tensor& lp = m.graph.value(m.log_probs);
  std::vector<double> loss(m.batch);
  for (std::size_t i = 0; i < m.batch; ++i) loss[i] = -lp.at(i, labels[i]);
  if (logits) *logits = m.graph.value(m.ng.logits);
  return loss;
}

std::vector<double> loss_gradient(const Network& net, std::span<const double> x, std::size_t label) {
  LossGradient lg(net, 1, x.size());
  Tensor grad;
  lg(Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())), {label}, grad);
  return grad.data;
}

std::vector<AttackOutcome> fgsm_batch(const Network& net, const Tensor& inputs, const std::vector<std::size_t>& labels,
                                      double eps) {
  if (!(eps >= 0)) throw std::invalid_argument("fgsm: epsilon must be non-negative");
  check_batch(inputs, labels);
  const std::size_t b = inputs.rows(), d = inputs.cols();
  LossGradient lg(net, b, d);
  Tensor grad, logits;
  lg(inputs, labels, grad, &logits);
  Tensor adv = inputs;
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = project_linf(inputs[i], inputs[i] + eps * sign(grad[i]), eps);
  const Tensor adv_logits = predict_logits(net, adv);
  std::vector<AttackOutcome> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    out[r].adversarial.assign(adv.data.begin() + r * d, adv.data.begin() + (r + 1) * d);
    out[r].failed = !all_finite(row_of(grad, r));
    finish(out[r], labels[r], row_of(inputs, r), row_of(logits, r), row_of(adv_logits, r));
  }
  return out;
}

AttackOutcome fgsm(const Network& net, std::span<const double> x, std::size_t label, double eps) {
  return fgsm_batch(net, Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())), {label}, eps).front();
}

std::vector<AttackOutcome> pgd_batch(const Network& net, const Tensor& inputs, const std::vector<std::size_t>& labels,
                                     double eps, double alpha, std::size_t steps, const PgdObserver& observer) {
  if (!(eps >= 0)) throw std::invalid_argument("pgd: epsilon must be non-negative");
  if (eps > 0 && (!(alpha > 0) || alpha > eps)) throw std::invalid_argument("pgd: step must be in (0, epsilon]");
  if (steps < 1) throw std::invalid_argument("pgd: steps must be >= 1");
  check_batch(inputs, labels);
  const std::size_t b = inputs.rows(), d = inputs.cols();
  LossGradient lg(net, b, d);
  Tensor grad, logits, orig_logits;
  std::vector<double> loss = lg(inputs, labels, grad, &orig_logits);
  std::vector<bool> failed(b, false);
  for (std::size_t r = 0; r < b; ++r) failed[r] = !all_finite(row_of(grad, r));

  Tensor x = inputs;
  Tensor best = inputs, best_logits = orig_logits;
  std::vector<double> best_loss(b, -std::numeric_limits<double>::infinity());
  if (eps == 0) steps = 0;
  for (std::size_t s = 1; s <= steps; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = project_linf(inputs[i], x[i] + alpha * sign(grad[i]), eps);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::abs(x[i] - inputs[i]) > eps) throw std::logic_error("pgd iterate left the epsilon ball");
    if (observer) observer(s, x);
    loss = lg(x, labels, grad, &logits);
    for (std::size_t r = 0; r < b; ++r) {
      if (!all_finite(row_of(grad, r))) failed[r] = true;
      if (s == 1 || loss[r] > best_loss[r]) {
        best_loss[r] = loss[r];
        std::copy_n(x.data.begin() + r * d, d, best.data.begin() + r * d);
        const std::size_t k = logits.cols();
        std::copy_n(logits.data.begin() + r * k, k, best_logits.data.begin() + r * k);
      }
    }
  }
  std::vector<AttackOutcome> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    out[r].adversarial.assign(best.data.begin() + r * d, best.data.begin() + (r + 1) * d);
    out[r].failed = failed[r];
    finish(out[r], labels[r], row_of(inputs, r), row_of(orig_logits, r), row_of(best_logits, r));
  }
  return out;
}

AttackOutcome pgd(const Network& net, std::span<const double> x, std::size_t label, double eps, double alpha,
                  std::size_t steps, const PgdObserver& observer) {
  return pgd_batch(net, Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())), {label}, eps, alpha,
                   steps, observer)
      .front();
}

double cw_to_box(double w, double lo, double hi) { return 0.5 * (std::tanh(w) + 1.0) * (hi - lo) + lo; }

double cw_margin(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size() || logits.size() < 2) throw std::invalid_argument("cw_margin: bad target");
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (i != target) other = std::max(other, logits[i]);
  return std::max(other - logits[target], 0.0);
}

namespace {

// Gradient of sum_b c_b * max(max_{i != t_b} z_bi - z_bt_b, 0) with respect to
// the input batch.
class MarginGradient {
 public:
  MarginGradient(const Network& net, std::size_t batch, std::size_t dim) : batch_(batch), dim_(dim) {
    classes_ = output_dim(net, dim);
    ng_ = build_network_graph(g_, net, batch, dim);
    mask_ = g_.input("mask");
    onehot_ = g_.input("onehot");
    weight_ = g_.input("weight");
    const NodeId other = g_.row_max(g_.add(ng_.logits, mask_));
    const NodeId own = g_.row_sum(g_.mul(ng_.logits, onehot_));
    margin_ = g_.relu(g_.sub(other, own));
    loss_ = g_.sum(g_.mul(margin_, weight_));
  }

  // Returns logits; fills grad.
  Tensor operator()(const Tensor& x, const std::vector<std::size_t>& targets, const std::vector<double>& c,
                    Tensor& grad) {
    Tensor mask(Shape{batch_, classes_});
    for (std::size_t r = 0; r < batch_; ++r) mask.at(r, targets[r]) = -1e30;
    g_.forward({{ng_.input, x},
                {mask_, std::move(mask)},
                {onehot_, one_hot(targets, classes_)},
                {weight_, Tensor(Shape{batch_}, c)}});
    g_.backward(loss_);
    grad = g_.grad(ng_.input);
    return g_.value(ng_.logits);
  }

 private:
  Graph g_;
  NetworkGraph ng_;
  NodeId mask_ = 0, onehot_ = 0, weight_ = 0, margin_ = 0, loss_ = 0;
  std::size_t batch_, dim_, classes_ = 0;
};

struct CwBatchResult {
  std::vector<AttackOutcome> outcomes;
  std::vector<bool> found;  // some iterate passed the success test within eps_max
};

double to_box(double w, const CwConfig& cfg) { return cw_to_box(w, cfg.box_lo, cfg.box_hi); }

double from_box(double x, const CwConfig& cfg) {
  const double u = 2.0 * (x - cfg.box_lo) / (cfg.box_hi - cfg.box_lo) - 1.0;
  return std::atanh(std::clamp(u, -1.0 + 1e-12, 1.0 - 1e-12));
}

// Lockstep inner optimization, one constant per row.
CwBatchResult cw_inner(MarginGradient& mg, const Tensor& inputs, const std::vector<std::size_t>& labels,
                       const std::vector<std::size_t>& targets, const std::vector<double>& c,
                       const std::vector<std::size_t>& original_class, const CwConfig& cfg) {
  const std::size_t b = inputs.rows(), d = inputs.cols();
  Tensor w(inputs.shape);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = from_box(inputs[i], cfg);
  Tensor xadv(inputs.shape), grad;
  CwBatchResult res;
  res.outcomes.resize(b);
  res.found.assign(b, false);
  std::vector<double> best_l2(b, std::numeric_limits<double>::infinity());
  std::vector<bool> failed(b, false);
  auto record = [&](const Tensor& logits, bool last) {
    for (std::size_t r = 0; r < b; ++r) {
      const auto xr = row_of(xadv, r);
      const auto lr = row_of(logits, r);
      if (!all_finite(lr)) {
        failed[r] = true;
        continue;
      }
      const Prediction p = confidence(lr);
      const double l2 = distortion(row_of(inputs, r), xr).l2;
      const bool ok = attack_succeeded(labels[r], original_class[r], p.class_index, p.confidence) && l2 <= cfg.eps_max;
      if ((ok && l2 < best_l2[r]) || (last && !res.found[r])) {
        AttackOutcome& o = res.outcomes[r];
        o.adversarial.assign(xr.begin(), xr.end());
        o.original_class = original_class[r];
        o.adversarial_class = p.class_index;
        o.adversarial_confidence = p.confidence;
        o.distortion = distortion(row_of(inputs, r), xr);
        o.success = ok;
        if (ok) {
          best_l2[r] = l2;
          res.found[r] = true;
        }
      }
    }
  };
  for (std::size_t it = 0; it <= cfg.inner_iters; ++it) {
    for (std::size_t i = 0; i < w.size(); ++i) xadv[i] = to_box(w[i], cfg);
    const Tensor logits = mg(xadv, targets, c, grad);
    record(logits, it == cfg.inner_iters);
    if (it == cfg.inner_iters) break;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double t = std::tanh(w[i]);
      const double dxdw = 0.5 * (1.0 - t * t) * (cfg.box_hi - cfg.box_lo);
      const double g = (2.0 * (xadv[i] - inputs[i]) + grad[i]) * dxdw;
      if (!std::isfinite(g)) failed[i / d] = true;
      else w[i] -= cfg.inner_lr * g;
    }
  }
  for (std::size_t r = 0; r < b; ++r)
    if (failed[r]) {
      res.outcomes[r].failed = true;
      res.outcomes[r].success = false;
      res.found[r] = false;
    }
  return res;
}

struct CwPrep {
  std::vector<std::size_t> original_class;
  std::vector<std::size_t> targets;
};

CwPrep cw_prepare(const Network& net, const Tensor& inputs, const std::vector<std::size_t>& labels,
                  const CwConfig& cfg) {
  const Tensor logits = predict_logits(net, inputs);
  CwPrep p;
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    const auto l = row_of(logits, r);
    p.original_class.push_back(all_finite(l) ? confidence(l).class_index : 0);
    std::size_t t;
    if (cfg.target) {
      t = *cfg.target;
      if (t >= l.size()) throw std::invalid_argument("cw target exceeds network outputs");
    } else {
      // Second-highest original logit; ties to the lowest index.
      const std::size_t top = p.original_class.back();
      t = top == 0 ? 1 : 0;
      for (std::size_t k = 0; k < l.size(); ++k)
        if (k != top && l[k] > l[t]) t = k;
    }
    if (t == labels[r]) {
      if (cfg.target) throw std::invalid_argument("cw target equals the true label");
      // Untargeted use: aim at the strongest class other than the label.
      t = labels[r] == 0 ? 1 : 0;
      for (std::size_t k = 0; k < l.size(); ++k)
        if (k != labels[r] && l[k] > l[t]) t = k;
    }
    p.targets.push_back(t);
  }
  return p;
}

std::vector<CwOutcome> cw_batch(const Network& net, const Tensor& inputs, const std::vector<std::size_t>& labels,
                                const CwConfig& cfg) {
  cfg.validate();
  check_batch(inputs, labels);
  const std::size_t b = inputs.rows();
  const CwPrep prep = cw_prepare(net, inputs, labels, cfg);
  MarginGradient mg(net, b, inputs.cols());
  std::vector<double> lo(b, cfg.c_low), hi(b, cfg.c_high), c(b, cfg.c_high);
  std::vector<CwOutcome> out(b);
  std::vector<bool> have(b, false);
  for (std::size_t r = 0; r < b; ++r) out[r].target = prep.targets[r];
  for (std::size_t step = 0; step < cfg.binary_steps; ++step) {
    if (step > 0)
      for (std::size_t r = 0; r < b; ++r) c[r] = std::sqrt(lo[r] * hi[r]);
    const CwBatchResult res = cw_inner(mg, inputs, labels, prep.targets, c, prep.original_class, cfg);
    for (std::size_t r = 0; r < b; ++r) {
      const AttackOutcome& o = res.outcomes[r];
      out[r].probes.push_back({c[r], res.found[r], o.distortion.l2});
      if (res.found[r]) {
        hi[r] = c[r];
        if (!have[r] || o.distortion.l2 < out[r].outcome.distortion.l2) {
          out[r].outcome = o;
          out[r].c = c[r];
          have[r] = true;
        }
      } else {
        // A failure at c_high (usually overshoot past eps_max) leaves the
        // interval intact so the search continues below it.
        if (step > 0) lo[r] = c[r];
        if (!have[r]) out[r].outcome = o;
      }
    }
  }
  return out;
}

}  // namespace

CwOutcome cw_fixed(const Network& net, std::span<const double> x, std::size_t label, std::size_t target, double c,
                   const CwConfig& cfg) {
  cfg.validate();
  if (!(c > 0)) throw std::invalid_argument("cw constant must be positive");
  const Tensor inputs(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end()));
  CwConfig fixed = cfg;
  fixed.target = target;
  const CwPrep prep = cw_prepare(net, inputs, {label}, fixed);
  MarginGradient mg(net, 1, x.size());
  const CwBatchResult res = cw_inner(mg, inputs, {label}, prep.targets, {c}, prep.original_class, fixed);
  CwOutcome out;
  out.outcome = res.outcomes.front();
  out.target = target;
  out.c = res.found.front() ? c : 0.0;
  out.probes.push_back({c, res.found.front(), out.outcome.distortion.l2});
  return out;
}

CwOutcome cw(const Network& net, std::span<const double> x, std::size_t label, const CwConfig& cfg) {
  return cw_batch(net, Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())), {label}, cfg).front();
}

SweepResult attack_sweep(const Network& net, const Dataset& data, const AttackConfig& cfg,
                         const std::vector<double>& epsilons, std::size_t keep) {
  cfg.validate();
  data.validate();
  if (!std::is_sorted(epsilons.begin(), epsilons.end())) throw std::invalid_argument("epsilon list must be ascending");
  for (double e : epsilons)
    if (!(e >= 0)) throw std::invalid_argument("epsilons must be non-negative");
  const std::size_t d = data.dim();
  const std::vector<Prediction> preds = predict(net, data.inputs);
  std::vector<std::size_t> correct;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (preds[i].class_index == data.labels[i]) correct.push_back(i);
  Tensor inputs(Shape{correct.size(), d});
  std::vector<std::size_t> labels(correct.size());
  for (std::size_t k = 0; k < correct.size(); ++k) {
    const auto row = data.row(correct[k]);
    std::copy(row.begin(), row.end(), inputs.data.begin() + k * d);
    labels[k] = data.labels[correct[k]];
  }

  SweepResult result;
  for (double eps : epsilons) {
    std::vector<AttackOutcome> outcomes(correct.size());
    constexpr std::size_t kChunk = 256;
    const std::size_t chunks = (correct.size() + kChunk - 1) / kChunk;
    parallel_for(chunks, [&](std::size_t c0, std::size_t c1) {
      for (std::size_t c = c0; c < c1; ++c) {
        const std::size_t begin = c * kChunk, end = std::min(correct.size(), begin + kChunk);
        Tensor xs(Shape{end - begin, d});
        std::copy(inputs.data.begin() + begin * d, inputs.data.begin() + end * d, xs.data.begin());
        const std::vector<std::size_t> ls(labels.begin() + begin, labels.begin() + end);
        std::vector<AttackOutcome> part;
        switch (cfg.kind) {
          case AttackKind::Fgsm: part = fgsm_batch(net, xs, ls, eps); break;
          case AttackKind::Pgd: part = pgd_batch(net, xs, ls, eps, eps * cfg.pgd_alpha_ratio, cfg.pgd_steps); break;
          case AttackKind::Cw: {
            if (eps == 0) {
              part = fgsm_batch(net, xs, ls, 0.0);
              break;
            }
            CwConfig cc = cfg.cw;
            cc.eps_max = eps;
            for (auto& o : cw_batch(net, xs, ls, cc)) part.push_back(std::move(o.outcome));
            break;
          }
        }
        std::move(part.begin(), part.end(), outcomes.begin() + begin);
      }
    });
    SweepRow row;
    row.epsilon = eps;
    row.attempted = correct.size();
    for (const AttackOutcome& o : outcomes)
      if (o.success) {
        ++row.succeeded;
        row.mean_l2 += o.distortion.l2;
        row.mean_linf += o.distortion.linf;
      }
    if (row.succeeded) {
      row.mean_l2 /= static_cast<double>(row.succeeded);
      row.mean_linf /= static_cast<double>(row.succeeded);
    }
    result.rows.push_back(row);
    std::vector<std::vector<double>> kept;
    for (std::size_t k = 0; k < std::min(keep, outcomes.size()); ++k) kept.push_back(outcomes[k].adversarial);
    result.samples.push_back(std::move(kept));
  }
  return result;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "epsilon,attempted,succeeded,mean_l2,mean_linf\n";
  out.precision(17);
  for (const SweepRow& r : rows)
    out << r.epsilon << ',' << r.attempted << ',' << r.succeeded << ',' << r.mean_l2 << ',' << r.mean_linf << '\n';
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_sweep_csv(rows, out);
}

}  // namespace fgn
