#include "cicf/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace cicf {

namespace {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const char* what) {
  for (E v : values)
    if (to_string(v) == s) return v;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(OuterMode v) { return v == OuterMode::first_order ? "first_order" : "exact_hvp"; }
std::string to_string(AllocationScheme v) {
  return v == AllocationScheme::proportional ? "proportional" : "equal";
}
std::string to_string(OuterSampler v) { return v == OuterSampler::uniform ? "uniform" : "per_cluster"; }
std::string to_string(UpdateScope v) { return v == UpdateScope::full ? "full" : "head_only"; }
std::string to_string(TaskMode v) { return v == TaskMode::domain ? "domain" : "random"; }

OuterMode parse_outer_mode(const std::string& s) {
  return parse_enum(s, {OuterMode::first_order, OuterMode::exact_hvp}, "outer_mode");
}
AllocationScheme parse_allocation_scheme(const std::string& s) {
  return parse_enum(s, {AllocationScheme::proportional, AllocationScheme::equal}, "allocation_scheme");
}
OuterSampler parse_outer_sampler(const std::string& s) {
  return parse_enum(s, {OuterSampler::uniform, OuterSampler::per_cluster}, "outer_sampler");
}
UpdateScope parse_update_scope(const std::string& s) {
  return parse_enum(s, {UpdateScope::full, UpdateScope::head_only}, "update_scope");
}
TaskMode parse_task_mode(const std::string& s) {
  return parse_enum(s, {TaskMode::domain, TaskMode::random}, "task_mode");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("training.alpha must be >= 0");
  if (!(beta >= 0.0)) throw ConfigError("training.beta must be >= 0");
  if (!std::isfinite(beta)) throw ConfigError("training.beta must be finite");
  if (epochs < 0) throw ConfigError("training.epochs must be >= 0");
  if (m < 1) throw ConfigError("training.M must be >= 1");
  if (m_l < 1) throw ConfigError("training.M_l must be >= 1");
  if (k < 1) throw ConfigError("clustering.K must be >= 1");
  if (!(hvp_eps > 0.0)) throw ConfigError("training.hvp_eps must be > 0");
}

EvalResult evaluate(const ModelSpec& spec, const Eigen::VectorXd& theta, const DomainDataset& dataset) {
  const int classes = spec.class_count();
  const BatchForward<double> fb = forward_batch(spec, theta, dataset.features);
  EvalResult r;
  r.confusion = Eigen::MatrixXi::Zero(classes, classes);
  std::size_t correct = 0;
  for (Index i = 0; i < fb.logits.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (fb.logits(i, c) > fb.logits(i, best)) best = c;
    const int truth = dataset.labels[static_cast<std::size_t>(i)];
    ++r.confusion(truth, best);
    if (best == truth) ++correct;
  }
  const auto losses = softmax_cross_entropy<double>(fb.logits, dataset.labels).second;
  r.loss = losses.mean();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  return r;
}

Objective cross_entropy_objective(const ModelSpec& spec) {
  return [spec](const Eigen::VectorXd& theta, const Batch& batch) { return loss_and_grad(spec, theta, batch); };
}

OuterGradient outer_gradient(const Objective& objective, const Eigen::VectorXd& theta,
                             const GradientEstimate& g_dagger, const Batch& global_batch,
                             const Batch& outer_batch, OuterMode mode, double hvp_eps,
                             UpdateScope scope, Index head_begin) {
  const Eigen::VectorXd theta_dagger = virtual_update(theta, g_dagger, scope, head_begin);
  LossGrad<double> at_dagger = objective(theta_dagger, outer_batch);
  OuterGradient out{std::move(at_dagger.grad), at_dagger.loss};
  if (mode == OuterMode::first_order || g_dagger.alpha == 0.0) return out;

  Eigen::VectorXd direction = out.grad;
  if (scope == UpdateScope::head_only) direction.head(head_begin).setZero();
  const Eigen::VectorXd curvature = hvp_central(
      [&](const Eigen::VectorXd& t) { return objective(t, global_batch).grad; }, theta, direction, hvp_eps);
  out.grad -= g_dagger.alpha * curvature;
  return out;
}

OuterGradient maml_outer_gradient(const Objective& objective, const Eigen::VectorXd& theta,
                                  const std::vector<TaskBatches>& tasks, double alpha, OuterMode mode,
                                  double hvp_eps) {
  if (tasks.empty()) throw ConfigError("MAML needs at least one task");
  OuterGradient total{Eigen::VectorXd::Zero(theta.size()), 0.0};
  for (const auto& task : tasks) {
    GradientEstimate inner;
    inner.g = objective(theta, task.meta_train).grad;
    inner.alpha = alpha;
    const OuterGradient og = outer_gradient(objective, theta, inner, task.meta_train, task.meta_test, mode, hvp_eps);
    total.grad += og.grad;
    total.loss += og.loss;
  }
  return total;
}

namespace {

std::size_t iterations_for(const TrainConfig& config, std::size_t n) {
  if (config.iterations_per_epoch > 0) return config.iterations_per_epoch;
  return std::max<std::size_t>(1, n / std::min(config.m_l, n));
}

std::vector<DomainScore> score(const ModelSpec& spec, const Eigen::VectorXd& theta,
                               const std::vector<EvalSet>& evals) {
  std::vector<DomainScore> out;
  for (const auto& e : evals) {
    const EvalResult r = evaluate(spec, theta, *e.data);
    out.push_back({e.domain, r.loss, r.accuracy});
  }
  return out;
}

/// Shared epoch loop. `step(iteration, theta)` updates theta in place and
/// returns the iteration's training loss.
template <typename Step>
TrainResult run_training(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                         const ParamVector& init, const std::vector<EvalSet>& evals,
                         const StepHook& hook, Step&& step) {
  config.validate();
  spec.validate();
  train.validate();
  if (spec.class_count() != train.class_count)
    throw ConfigError("model output width " + std::to_string(spec.class_count()) +
                      " != class count " + std::to_string(train.class_count));
  if (spec.input_dim() != train.feature_dim())
    throw ConfigError("model input width " + std::to_string(spec.input_dim()) +
                      " != feature dimension " + std::to_string(train.feature_dim()));
  if (init.size() != Manifest::of(spec).size) throw ShapeError("initial parameters do not match the model spec");

  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  RunMetrics& metrics = result.metrics;
  metrics.seed = config.seed;
  Eigen::VectorXd theta = init.values;
  const std::size_t iters = iterations_for(config, train.size());

  std::size_t global_iter = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t it = 0; it < iters; ++it, ++global_iter) {
      double loss;
      try {
        loss = step(global_iter, theta);
      } catch (const NumericError& e) {
        throw TrainingDiverged("diverged at epoch " + std::to_string(epoch) + ": " + e.what(), metrics);
      }
      if (!std::isfinite(loss) || !theta.allFinite())
        throw TrainingDiverged("diverged at epoch " + std::to_string(epoch) + ": non-finite loss or parameters",
                               metrics);
      loss_sum += loss;
      if (hook) hook(global_iter, theta);
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(iters);
    try {
      em.train_accuracy = evaluate(spec, theta, train).accuracy;
      em.test = score(spec, theta, evals);
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("evaluation failed: ") + e.what(), metrics);
    }
    metrics.epochs.push_back(std::move(em));
  }

  metrics.final_test = metrics.epochs.empty() ? score(spec, theta, evals) : metrics.epochs.back().test;
  double acc = 0.0;
  for (const auto& d : metrics.final_test) acc += d.accuracy;
  metrics.mean_test_accuracy = metrics.final_test.empty() ? 0.0 : acc / static_cast<double>(metrics.final_test.size());
  metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.model = ParamVector(std::move(theta), init.manifest);
  return result;
}

const ClusterAssignment kNoClusters{};

}  // namespace

TrainResult train_erm(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                      const ParamVector& init, const std::vector<EvalSet>& evals, const StepHook& hook) {
  Rng batches(derive_seed(config.seed, 1));
  const std::size_t m_l = std::min(config.m_l, train.size());
  return run_training(config, spec, train, init, evals, hook, [&](std::size_t, Eigen::VectorXd& theta) {
    const Batch batch = train.batch(draw_indices(train, kNoClusters, SamplerKind::random, nullptr, m_l, batches));
    const LossGrad<double> lg = loss_and_grad(spec, theta, batch);
    theta -= config.beta * lg.grad;
    return lg.loss;
  });
}

TrainResult train_cicf(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                       const ClusterAssignment& clusters, const ParamVector& init,
                       const std::vector<EvalSet>& evals, const StepHook& hook) {
  clusters.validate(&train);
  Rng outer_rng(derive_seed(config.seed, 1));
  Rng global_rng(derive_seed(config.seed, 2));
  const std::size_t m = std::min(config.m, train.size());
  const std::size_t m_l = std::min(config.m_l, train.size());
  const Allocation global_alloc = config.allocation_scheme == AllocationScheme::proportional
                                      ? proportional_allocation(clusters.sizes, m)
                                      : equal_allocation(clusters.sizes, m);
  const Allocation outer_alloc = equal_allocation(clusters.sizes, m_l);
  const Objective objective = cross_entropy_objective(spec);
  const Index head_begin = Manifest::of(spec).head_begin(spec.split_index);

  return run_training(config, spec, train, init, evals, hook, [&](std::size_t, Eigen::VectorXd& theta) {
    const GradientEstimate g_dagger =
        global_gradient(spec, theta, train, clusters, global_alloc, global_rng, config.alpha,
                        config.allocation_scheme == AllocationScheme::proportional
                            ? SamplerKind::stratified_proportional
                            : SamplerKind::stratified_equal);
    const std::vector<std::size_t> outer_rows =
        config.outer_sampler == OuterSampler::uniform
            ? draw_indices(train, clusters, SamplerKind::random, nullptr, m_l, outer_rng)
            : draw_indices(train, clusters, SamplerKind::stratified_equal, &outer_alloc, m_l, outer_rng);
    const Batch outer_batch = train.batch(outer_rows);
    const Batch global_batch =
        config.outer_mode == OuterMode::exact_hvp ? train.batch(g_dagger.batch_indices) : Batch{};
    const OuterGradient og = outer_gradient(objective, theta, g_dagger, global_batch, outer_batch,
                                            config.outer_mode, config.hvp_eps, config.update_scope, head_begin);
    theta -= config.beta * og.grad;
    return og.loss;
  });
}

TrainResult train_cicf(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                       const ParamVector& init, const std::vector<EvalSet>& evals, const StepHook& hook) {
  ClusterOptions opts;
  opts.k = config.k;
  opts.seed = derive_seed(config.seed, 3);
  return train_cicf(config, spec, train, cluster_per_class(train, opts), init, evals, hook);
}

std::vector<TaskSplit> make_domain_tasks(const DomainDataset& train) {
  std::vector<TaskSplit> tasks;
  for (int d : train.present_domains()) {
    TaskSplit t;
    t.task_id = static_cast<int>(tasks.size());
    t.meta_train = train.rows_of_domain(d);
    t.meta_test = t.meta_train;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<TaskSplit> make_random_tasks(const DomainDataset& train, int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("MAML needs at least one task");
  Rng rng(seed);
  const auto order = rng.sample_without_replacement(train.size(), train.size());
  std::vector<TaskSplit> tasks(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < order.size(); ++i) tasks[i % tasks.size()].meta_train.push_back(order[i]);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    tasks[t].task_id = static_cast<int>(t);
    std::sort(tasks[t].meta_train.begin(), tasks[t].meta_train.end());
    tasks[t].meta_test = tasks[t].meta_train;
  }
  return tasks;
}

TrainResult train_maml(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                       const std::vector<TaskSplit>& tasks, const ParamVector& init,
                       const std::vector<EvalSet>& evals, const StepHook& hook) {
  if (tasks.empty()) throw ConfigError("MAML needs at least one task");
  for (const auto& t : tasks) {
    const bool shared = t.meta_train == t.meta_test;
    if (t.meta_train.empty() || t.meta_test.empty() || (shared && t.meta_train.size() < 2))
      throw ConfigError("MAML task " + std::to_string(t.task_id) + " has too few samples");
  }
  Rng rng(derive_seed(config.seed, 1));
  const Objective objective = cross_entropy_objective(spec);
  const std::size_t per_task = std::max<std::size_t>(1, config.m_l / tasks.size());

  return run_training(config, spec, train, init, evals, hook, [&](std::size_t, Eigen::VectorXd& theta) {
    std::vector<TaskBatches> batches;
    for (const auto& t : tasks) {
      TaskBatches tb;
      if (t.meta_train == t.meta_test) {
        const std::size_t b = std::min(per_task, t.meta_train.size() / 2);
        auto rows = rng.sample_from(t.meta_train, 2 * b);
        tb.meta_train = train.batch({rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(b)});
        tb.meta_test = train.batch({rows.begin() + static_cast<std::ptrdiff_t>(b), rows.end()});
      } else {
        tb.meta_train = train.batch(rng.sample_from(t.meta_train, std::min(per_task, t.meta_train.size())));
        tb.meta_test = train.batch(rng.sample_from(t.meta_test, std::min(per_task, t.meta_test.size())));
      }
      batches.push_back(std::move(tb));
    }
    const OuterGradient og =
        maml_outer_gradient(objective, theta, batches, config.alpha, config.outer_mode, config.hvp_eps);
    theta -= config.beta * og.grad;
    return og.loss / static_cast<double>(tasks.size());
  });
}

}  // namespace cicf
