#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fgn/data.hpp"
#include "fgn/layers.hpp"

namespace fgn {

enum class AttackKind { Fgsm, Pgd, Cw };
AttackKind parse_attack(const std::string& name);
const char* attack_name(AttackKind k);

struct CwConfig {
  double eps_max = 2.0;  // largest accepted l2 distortion
  double c_low = 1e-3;
  double c_high = 1e2;
  std::size_t binary_steps = 9;
  std::size_t inner_iters = 200;
  double inner_lr = 0.01;
  double box_lo = 0.0;
  double box_hi = 1.0;
  /// Target class; unset picks the second-highest original logit.
  std::optional<std::size_t> target;

  void validate() const;
};

struct AttackConfig {
  AttackKind kind = AttackKind::Fgsm;
  /// PGD step as a fraction of epsilon and step count.
  double pgd_alpha_ratio = 1.0 / 30.0;
  std::size_t pgd_steps = 50;
  CwConfig cw;

  void validate() const;
};

struct Distortion {
  double linf = 0.0;
  double l2 = 0.0;
};

struct AttackOutcome {
  std::vector<double> adversarial;
  std::size_t original_class = 0;
  std::size_t adversarial_class = 0;
  double adversarial_confidence = 0.0;
  bool success = false;
  /// Non-finite gradient or logits; the outcome is never a success.
  bool failed = false;
  Distortion distortion;
};

/// The success predicate: the original prediction was right, the adversarial
/// one is wrong, and it is made with confidence above one half.
bool attack_succeeded(std::size_t label, std::size_t original_class, std::size_t adversarial_class,
                      double adversarial_confidence);

Distortion distortion(std::span<const double> x, std::span<const double> adversarial);

/// Gradient of the per-row cross-entropy loss with respect to a [B x D]
/// batch; rows are independent. Reuses one graph across calls.
class LossGradient {
 public:
  LossGradient(const Network& net, std::size_t batch, std::size_t dim);
  ~LossGradient();
  LossGradient(LossGradient&&) noexcept;
  LossGradient& operator=(LossGradient&&) noexcept;

  /// Fills `grad` [B x D]; returns per-row loss. `logits` receives [B x K].
  std::vector<double> operator()(const Tensor& x, const std::vector<std::size_t>& labels, Tensor& grad,
                                 Tensor* logits = nullptr);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Per-sample gradient of the cross-entropy loss.
std::vector<double> loss_gradient(const Network& net, std::span<const double> x, std::size_t label);

AttackOutcome fgsm(const Network& net, std::span<const double> x, std::size_t label, double eps);
std::vector<AttackOutcome> fgsm_batch(const Network& net, const Tensor& inputs, const std::vector<std::size_t>& labels,
                                      double eps);

/// min(x + eps, max(x - eps, proposal)), nudged so |result - x| <= eps holds
/// in floating point.
double project_linf(double x, double proposal, double eps);

/// Called after every PGD step with the step index and the [B x D] iterate.
using PgdObserver = std::function<void(std::size_t step, const Tensor& iterate)>;

AttackOutcome pgd(const Network& net, std::span<const double> x, std::size_t label, double eps, double alpha,
                  std::size_t steps, const PgdObserver& observer = {});
std::vector<AttackOutcome> pgd_batch(const Network& net, const Tensor& inputs, const std::vector<std::size_t>& labels,
                                     double eps, double alpha, std::size_t steps, const PgdObserver& observer = {});

/// Box reparameterization: 0.5 (tanh(w) + 1) (hi - lo) + lo.
double cw_to_box(double w, double lo, double hi);

/// max(max_{i != target} z_i - z_target, 0).
double cw_margin(std::span<const double> logits, std::size_t target);

struct CwProbe {
  double c = 0.0;
  bool success = false;
  double l2 = 0.0;
};

struct CwOutcome {
  AttackOutcome outcome;
  std::size_t target = 0;
  /// The constant whose candidate was returned (0 when nothing succeeded).
  double c = 0.0;
  std::vector<CwProbe> probes;
};

/// One inner optimization at a fixed constant; keeps the smallest-distortion
/// successful iterate, or the last iterate when none succeeds.
CwOutcome cw_fixed(const Network& net, std::span<const double> x, std::size_t label, std::size_t target, double c,
                   const CwConfig& cfg);

/// Probes c_high, then bisects geometrically over [c_low, c_high]: a success
/// moves the upper end down, a failure moves the lower end up. Returns the
/// smallest-distortion success among all probes.
CwOutcome cw(const Network& net, std::span<const double> x, std::size_t label, const CwConfig& cfg);

struct SweepRow {
  double epsilon = 0.0;
  std::size_t attempted = 0;
  std::size_t succeeded = 0;
  double mean_l2 = 0.0;    // over successes; 0 when none
  double mean_linf = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  /// Up to `keep` adversarial inputs per epsilon, in dataset order of the
  /// attempted inputs.
  std::vector<std::vector<std::vector<double>>> samples;
};

/// Attacks every correctly classified input at each epsilon (ascending). For
/// CW, epsilon replaces eps_max.
SweepResult attack_sweep(const Network& net, const Dataset& data, const AttackConfig& cfg,
                         const std::vector<double>& epsilons, std::size_t keep = 0);

/// epsilon,attempted,succeeded,mean_l2,mean_linf
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace fgn
