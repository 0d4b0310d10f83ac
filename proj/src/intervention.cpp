#include "cicf/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "cicf/errors.hpp"

namespace cicf {

GradientEstimate global_gradient(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                 const DomainDataset& dataset, const ClusterAssignment& assignment,
                                 const Allocation& allocation, Rng& rng, double alpha,
                                 SamplerKind kind) {
  if (!is_stratified(kind)) throw ConfigError("global_gradient needs a stratified sampler");
  GradientEstimate est;
  const Batch batch = draw(dataset, assignment, kind, &allocation, allocation.total(), rng);
  LossGrad<double> lg = loss_and_grad(spec, theta, batch);
  est.g = std::move(lg.grad);
  est.loss = lg.loss;
  est.sampler = kind;
  est.batch_indices = batch.indices;
  est.allocation = allocation;
  est.alpha = alpha;
  return est;
}

Eigen::VectorXd virtual_update(const Eigen::VectorXd& theta, const GradientEstimate& estimate,
                               UpdateScope scope, Index head_begin) {
  if (theta.size() != estimate.g.size())
    throw ShapeError("virtual_update: gradient length " + std::to_string(estimate.g.size()) +
                     " != parameter length " + std::to_string(theta.size()));
  if (scope == UpdateScope::full) return theta - estimate.alpha * estimate.g;
  Eigen::VectorXd out = theta;
  const Index tail = theta.size() - head_begin;
  out.tail(tail) -= estimate.alpha * estimate.g.tail(tail);
  return out;
}

ParamVector virtual_update(const ParamVector& theta, const GradientEstimate& estimate) {
  return {virtual_update(theta.values, estimate), theta.manifest};
}

double taylor_residual(const ModelSpec& spec, const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                       const Batch& batch_for_g, double alpha, double fd_step) {
  if (alpha < 0.0) throw ConfigError("taylor_residual: alpha must be non-negative");
  if (!(fd_step > 0.0)) throw ConfigError("taylor_residual: fd_step must be positive");
  const Eigen::VectorXd g = loss_and_grad(spec, theta, batch_for_g).grad;
  const double norm = g.norm();
  if (alpha == 0.0 || norm == 0.0) return 0.0;

  const Eigen::VectorXd base = forward(spec, theta, x).logits;
  const Eigen::VectorXd moved = forward(spec, theta - alpha * g, x).logits;
  const Eigen::VectorXd unit = g / norm;
  const Eigen::VectorXd directional =
      (forward(spec, theta + fd_step * unit, x).logits - forward(spec, theta - fd_step * unit, x).logits) *
      (norm / (2.0 * fd_step));
  const double r = (moved - (base - alpha * directional)).cwiseAbs().maxCoeff();
  if (!std::isfinite(r)) throw NumericError("taylor_residual: non-finite residual");
  return r;
}

double se_random(double sigma2, std::size_t m, std::size_t n, SeMode mode) {
  if (sigma2 < 0.0) throw DomainError("se_random: sigma2 must be non-negative");
  if (n < 2) throw DomainError("se_random: population must have at least 2 samples");
  if (m < 1 || m > n)
    throw DomainError("se_random: M=" + std::to_string(m) + " outside [1, N=" + std::to_string(n) + "]");
  const double base = sigma2 / static_cast<double>(m);
  if (mode == SeMode::approx) return base;
  return base * (1.0 - static_cast<double>(m - 1) / static_cast<double>(n - 1));
}

double se_ours(std::span<const double> weights, std::span<const std::size_t> allocation,
               std::span<const std::size_t> cluster_sizes, std::span<const double> sigma2_k,
               SeMode mode) {
  const std::size_t k = weights.size();
  if (allocation.size() != k || cluster_sizes.size() != k || sigma2_k.size() != k)
    throw DomainError("se_ours: per-cluster inputs have different lengths");
  const std::size_t m = std::accumulate(allocation.begin(), allocation.end(), std::size_t{0});
  if (m == 0) throw DomainError("se_ours: empty allocation");
  double se = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (sigma2_k[i] < 0.0) throw DomainError("se_ours: negative variance");
    if (mode == SeMode::approx) {
      se += weights[i] * (sigma2_k[i] / static_cast<double>(m));
      continue;
    }
    const std::size_t nk = allocation[i];
    const std::size_t size = cluster_sizes[i];
    if (nk < 1) throw DomainError("se_ours: exact mode needs N_k >= 1 (cluster " + std::to_string(i) + ")");
    if (nk > size) throw DomainError("se_ours: N_k exceeds cluster size (cluster " + std::to_string(i) + ")");
    if (nk == size) continue;
    const double fpc = 1.0 - static_cast<double>(nk - 1) / static_cast<double>(size - 1);
    se += weights[i] * weights[i] * (sigma2_k[i] / static_cast<double>(nk) * fpc);
  }
  return se;
}

double stratified_rounding_bias(const Allocation& allocation, std::span<const double> weights,
                                const Eigen::MatrixXd& mu_k) {
  const double m = static_cast<double>(allocation.total());
  Eigen::VectorXd bias = Eigen::VectorXd::Zero(mu_k.cols());
  for (std::size_t i = 0; i < weights.size(); ++i)
    bias += (static_cast<double>(allocation.counts[i]) / m - weights[i]) * mu_k.row(static_cast<Index>(i)).transpose();
  return bias.norm();
}

McEstimate monte_carlo_se(const Eigen::MatrixXd& per_sample_gradients, const DomainDataset& dataset,
                          const ClusterAssignment& assignment, SamplerKind kind,
                          const Allocation* allocation, std::size_t m, std::size_t trials,
                          std::uint64_t seed, unsigned threads) {
  if (trials < kMinMonteCarloTrials)
    throw ConfigError("monte_carlo_se: at least " + std::to_string(kMinMonteCarloTrials) + " trials required");
  if (static_cast<std::size_t>(per_sample_gradients.rows()) != dataset.size())
    throw ShapeError("monte_carlo_se: one gradient row per sample required");

  const Eigen::VectorXd mu = per_sample_gradients.colwise().mean().transpose();
  std::vector<double> errors(trials);
  auto work = [&](std::size_t begin, std::size_t end) {
    Eigen::VectorXd mean(mu.size());
    for (std::size_t t = begin; t < end; ++t) {
      Rng rng(derive_seed(seed, t));
      const auto rows = draw_indices(dataset, assignment, kind, allocation, m, rng);
      mean.setZero();
      for (std::size_t r : rows) mean += per_sample_gradients.row(static_cast<Index>(r)).transpose();
      mean /= static_cast<double>(rows.size());
      errors[t] = (mean - mu).squaredNorm();
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(trials)));
  if (threads == 1) {
    work(0, trials);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (trials + threads - 1) / threads;
    for (unsigned w = 0; w < threads; ++w) {
      const std::size_t b = w * chunk, e = std::min(trials, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }

  McEstimate out;
  out.trials = trials;
  double sum = 0.0;
  for (double e : errors) sum += e;
  out.estimate = sum / static_cast<double>(trials);

  Rng boot(derive_seed(seed, ~std::uint64_t{0}));
  std::vector<double> means(kBootstrapResamples);
  for (auto& bm : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < trials; ++i) s += errors[boot.below(trials)];
    bm = s / static_cast<double>(trials);
  }
  const double bmean = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
  double var = 0.0;
  for (double bm : means) var += (bm - bmean) * (bm - bmean);
  var /= static_cast<double>(means.size() - 1);
  out.half_width = 1.96 * std::sqrt(var);
  return out;
}

SeReport analyze_se(const Eigen::MatrixXd& per_sample_gradients, const DomainDataset& dataset,
                    const ClusterAssignment& assignment, std::size_t m, std::size_t trials,
                    std::uint64_t seed, unsigned threads) {
  const ClusterGradientStats stats = cluster_gradient_stats(per_sample_gradients, assignment);
  const Allocation alloc = proportional_allocation(assignment.sizes, m);
  const std::vector<double> sigma2_k(stats.sigma2_k.data(), stats.sigma2_k.data() + stats.sigma2_k.size());

  SeReport r;
  r.m = m;
  r.trials = trials;
  r.seed = seed;
  r.se_random_exact = se_random(stats.sigma2, m, dataset.size(), SeMode::exact);
  r.se_random_approx = se_random(stats.sigma2, m, dataset.size(), SeMode::approx);
  r.se_ours_approx = se_ours(assignment.weights, alloc.counts, assignment.sizes, sigma2_k, SeMode::approx);
  if (std::all_of(alloc.counts.begin(), alloc.counts.end(), [](std::size_t c) { return c > 0; }))
    r.se_ours_exact = se_ours(assignment.weights, alloc.counts, assignment.sizes, sigma2_k, SeMode::exact);
  r.rounding_bias = stratified_rounding_bias(alloc, assignment.weights, stats.mu_k);
  r.se_random_mc = monte_carlo_se(per_sample_gradients, dataset, assignment, SamplerKind::random, nullptr,
                                  m, trials, derive_seed(seed, 1), threads);
  r.se_ours_mc = monte_carlo_se(per_sample_gradients, dataset, assignment,
                                SamplerKind::stratified_proportional, &alloc, m, trials,
                                derive_seed(seed, 2), threads);
  return r;
}

nlohmann::json to_json(const SeReport& r) {
  nlohmann::json j;
  j["M"] = r.m;
  j["se_random_exact"] = r.se_random_exact;
  j["se_random_approx"] = r.se_random_approx;
  j["se_ours_exact"] = r.se_ours_exact ? nlohmann::json(*r.se_ours_exact) : nlohmann::json(nullptr);
  j["se_ours_approx"] = r.se_ours_approx;
  j["se_random_mc"] = r.se_random_mc.estimate;
  j["se_random_mc_half_width"] = r.se_random_mc.half_width;
  j["se_ours_mc"] = r.se_ours_mc.estimate;
  j["se_ours_mc_half_width"] = r.se_ours_mc.half_width;
  j["rounding_bias"] = r.rounding_bias;
  j["trials"] = r.trials;
  j["seed"] = r.seed;
  return j;
}

}  // namespace cicf
