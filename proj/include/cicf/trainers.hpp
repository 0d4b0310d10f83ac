#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cicf/clustering.hpp"
#include "cicf/data.hpp"
#include "cicf/errors.hpp"
#include "cicf/intervention.hpp"
#include "cicf/model.hpp"
#include "cicf/sampling.hpp"

namespace cicf {

enum class OuterMode { first_order, exact_hvp };
enum class AllocationScheme { proportional, equal };
enum class OuterSampler { uniform, per_cluster };
enum class TaskMode { domain, random };

std::string to_string(OuterMode v);
std::string to_string(AllocationScheme v);
std::string to_string(OuterSampler v);
std::string to_string(UpdateScope v);
std::string to_string(TaskMode v);
OuterMode parse_outer_mode(const std::string& s);
AllocationScheme parse_allocation_scheme(const std::string& s);
OuterSampler parse_outer_sampler(const std::string& s);
UpdateScope parse_update_scope(const std::string& s);
TaskMode parse_task_mode(const std::string& s);

struct TrainConfig {
  double alpha = 0.05;  // inner (virtual) step
  double beta = 0.01;   // outer step
  int epochs = 60;
  std::size_t m = 256;    // global-gradient batch
  std::size_t m_l = 84;   // outer-loss batch (also the ERM batch)
  int k = 3;              // clusters per class
  OuterMode outer_mode = OuterMode::first_order;
  AllocationScheme allocation_scheme = AllocationScheme::proportional;
  OuterSampler outer_sampler = OuterSampler::uniform;
  UpdateScope update_scope = UpdateScope::full;
  TaskMode task_mode = TaskMode::domain;
  double hvp_eps = 1e-4;
  std::size_t iterations_per_epoch = 0;  // 0: max(1, N / m_l)
  std::uint64_t seed = 0;

  void validate() const;
};

struct DomainScore {
  int domain = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;      // mean over the epoch's iterations
  double train_accuracy = 0.0;  // full training set at epoch end
  std::vector<DomainScore> test;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::vector<DomainScore> final_test;
  double mean_test_accuracy = 0.0;  // mean of final_test accuracies
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ParamVector model;
  RunMetrics metrics;
};

/// Thrown when the loss or parameters become non-finite; carries the
/// metrics of the completed epochs.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, RunMetrics partial)
      : NumericError(what), partial_(std::move(partial)) {}
  const RunMetrics& partial() const { return partial_; }

 private:
  RunMetrics partial_;
};

struct EvalSet {
  int domain = 0;
  const DomainDataset* data = nullptr;
};

/// Called after every parameter update with the iteration index and the new
/// parameters.
using StepHook = std::function<void(std::size_t, const Eigen::VectorXd&)>;

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  Eigen::MatrixXi confusion;  // rows: true class, cols: predicted class
};

/// Argmax classification, ties to the lowest class index.
EvalResult evaluate(const ModelSpec& spec, const Eigen::VectorXd& theta, const DomainDataset& dataset);

/// Loss/gradient oracle over a batch; the cross-entropy network by default,
/// swappable for analytic test objectives.
using Objective = std::function<LossGrad<double>(const Eigen::VectorXd&, const Batch&)>;
Objective cross_entropy_objective(const ModelSpec& spec);

struct OuterGradient {
  Eigen::VectorXd grad;
  double loss = 0.0;  // outer loss at the virtual parameters
};

/// Gradient of L(outer batch; theta_dagger) with theta_dagger = theta - alpha g_dagger.
/// first_order treats g_dagger as constant; exact_hvp chains through
/// g_dagger(theta): grad - alpha * H(theta; global batch) * grad.
OuterGradient outer_gradient(const Objective& objective, const Eigen::VectorXd& theta,
                             const GradientEstimate& g_dagger, const Batch& global_batch,
                             const Batch& outer_batch, OuterMode mode, double hvp_eps = 1e-4,
                             UpdateScope scope = UpdateScope::full, Index head_begin = 0);

/// Plain mini-batch SGD (batch size m_l, step beta).
TrainResult train_erm(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                      const ParamVector& init, const std::vector<EvalSet>& evals = {},
                      const StepHook& hook = {});

/// Two-stage update per iteration: stratified g_dagger, virtual step,
/// outer loss at the virtual parameters, real step with the outer gradient.
TrainResult train_cicf(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                       const ClusterAssignment& clusters, const ParamVector& init,
                       const std::vector<EvalSet>& evals = {}, const StepHook& hook = {});

/// Clusters `train` once (raw inputs, K = config.k) and runs train_cicf.
TrainResult train_cicf(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                       const ParamVector& init, const std::vector<EvalSet>& evals = {},
                       const StepHook& hook = {});

struct TaskSplit {
  int task_id = 0;
  std::vector<std::size_t> meta_train;  // row pools
  std::vector<std::size_t> meta_test;
};

/// One task per source domain; meta-train and meta-test batches are drawn
/// disjointly from that domain's rows.
std::vector<TaskSplit> make_domain_tasks(const DomainDataset& train);

/// `count` tasks over a random partition of the rows (no domain labels).
std::vector<TaskSplit> make_random_tasks(const DomainDataset& train, int count, std::uint64_t seed);

struct TaskBatches {
  Batch meta_train;
  Batch meta_test;
};

/// Sum over tasks of the meta-test loss gradient at theta - alpha g_tr^t.
OuterGradient maml_outer_gradient(const Objective& objective, const Eigen::VectorXd& theta,
                                  const std::vector<TaskBatches>& tasks, double alpha, OuterMode mode,
                                  double hvp_eps = 1e-4);

TrainResult train_maml(const TrainConfig& config, const ModelSpec& spec, const DomainDataset& train,
                       const std::vector<TaskSplit>& tasks, const ParamVector& init,
                       const std::vector<EvalSet>& evals = {}, const StepHook& hook = {});

}  // namespace cicf
