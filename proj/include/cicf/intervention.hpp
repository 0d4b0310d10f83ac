#pragma once

// Global-scope gradient estimation and the standard-error analytics that
// compare stratified ("clustering-then-sampling") and random mini-batches.
//
// Standard error here is the mean squared Euclidean deviation of a batch-mean
// gradient from the exact population-mean gradient; sigma2 values are
// population (divide-by-N) scalar variances.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "cicf/clustering.hpp"
#include "cicf/data.hpp"
#include "cicf/model.hpp"
#include "cicf/rng.hpp"
#include "cicf/sampling.hpp"

namespace cicf {

struct GradientEstimate {
  Eigen::VectorXd g;
  SamplerKind sampler = SamplerKind::stratified_proportional;
  std::vector<std::size_t> batch_indices;
  std::optional<Allocation> allocation;
  double alpha = 0.0;
  double loss = 0.0;  // batch loss at the point where g was taken
};

/// Mean gradient over a stratified batch drawn with `allocation`.
GradientEstimate global_gradient(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                 const DomainDataset& dataset, const ClusterAssignment& assignment,
                                 const Allocation& allocation, Rng& rng, double alpha,
                                 SamplerKind kind = SamplerKind::stratified_proportional);

enum class UpdateScope { full, head_only };

/// theta - alpha * g. With `head_only`, entries before `head_begin` are kept.
Eigen::VectorXd virtual_update(const Eigen::VectorXd& theta, const GradientEstimate& estimate,
                               UpdateScope scope = UpdateScope::full, Index head_begin = 0);
ParamVector virtual_update(const ParamVector& theta, const GradientEstimate& estimate);

/// Max-norm gap between f at theta - alpha g and its first-order expansion
/// f(theta) - alpha (grad_theta f . g), where g is the batch gradient of
/// `batch_for_g`. The directional derivative is a central difference along g
/// with step `fd_step` on the unit direction.
double taylor_residual(const ModelSpec& spec, const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                       const Batch& batch_for_g, double alpha, double fd_step = 1e-5);

enum class SeMode { exact, approx };

/// sigma2 / M * (1 - (M-1)/(N-1)); approx drops the finite-population factor.
double se_random(double sigma2, std::size_t m, std::size_t n, SeMode mode);

/// exact: sum_k P_k^2 / N_k * (1 - (N_k-1)/(N_k^K-1)) * sigma2_k
/// approx: sum_k P_k / M * sigma2_k with M = sum_k N_k.
/// A census stratum (N_k = N_k^K) contributes zero in exact mode.
double se_ours(std::span<const double> weights, std::span<const std::size_t> allocation,
               std::span<const std::size_t> cluster_sizes, std::span<const double> sigma2_k,
               SeMode mode);

/// |sum_k (N_k/M - P_k) mu_k|: bias of the stratified mean when N_k is not
/// exactly M P_k.
double stratified_rounding_bias(const Allocation& allocation, std::span<const double> weights,
                                const Eigen::MatrixXd& mu_k);

struct McEstimate {
  double estimate = 0.0;
  double half_width = 0.0;  // bootstrap 95%
  std::size_t trials = 0;
};

/// Empirical SE of batch-mean gradients. Trial t draws with its own stream
/// Rng(derive_seed(seed, t)); trials are reduced in index order, so the
/// result does not depend on `threads`.
McEstimate monte_carlo_se(const Eigen::MatrixXd& per_sample_gradients, const DomainDataset& dataset,
                          const ClusterAssignment& assignment, SamplerKind kind,
                          const Allocation* allocation, std::size_t m, std::size_t trials,
                          std::uint64_t seed, unsigned threads = 1);

inline constexpr std::size_t kMinMonteCarloTrials = 100;
inline constexpr std::size_t kBootstrapResamples = 200;

struct SeReport {
  std::size_t m = 0;
  double se_random_exact = 0.0;
  double se_random_approx = 0.0;
  std::optional<double> se_ours_exact;  // empty when some N_k = 0
  double se_ours_approx = 0.0;
  McEstimate se_random_mc;
  McEstimate se_ours_mc;
  double rounding_bias = 0.0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
};

/// Analytic and Monte-Carlo SE for random vs proportional stratified batches.
SeReport analyze_se(const Eigen::MatrixXd& per_sample_gradients, const DomainDataset& dataset,
                    const ClusterAssignment& assignment, std::size_t m, std::size_t trials,
                    std::uint64_t seed, unsigned threads = 1);

nlohmann::json to_json(const SeReport& report);

}  // namespace cicf
