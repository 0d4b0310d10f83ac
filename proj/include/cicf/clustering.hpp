#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cicf/data.hpp"
#include "cicf/model.hpp"

namespace cicf {

struct KMeansResult {
  std::vector<int> labels;
  Eigen::MatrixXd centroids;  // k x dim
  double inertia = 0.0;
  std::vector<double> inertia_history;  // one entry per Lloyd iteration
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Rows of `points` are points.
/// Stops once no centroid moves by `tol` or more, or after `max_iter`
/// iterations. Empty clusters are refilled with the point farthest from its
/// own centroid (taken from a cluster that keeps at least one member).
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter = 100,
                    double tol = 1e-9);

enum class ClusteringSpace { raw_input, encoder_output };

/// Stratification of a dataset into K-dagger clusters.
struct ClusterAssignment {
  std::vector<int> cluster_of;                   // sample row -> cluster id
  Eigen::MatrixXd centroids;                     // K-dagger x dim, clustering space
  std::vector<std::size_t> sizes;                // N_k^K
  std::vector<double> weights;                   // P(K_k) = N_k^K / N
  std::vector<int> class_of_cluster;             // -1 for class-mixed (pooled) clusters
  std::vector<std::vector<std::size_t>> members; // ascending sample rows per cluster
  std::vector<int> clamped_classes;              // classes where K_c < K

  std::size_t cluster_count() const { return sizes.size(); }
  std::size_t sample_count() const { return cluster_of.size(); }

  /// Rebuilds sizes, weights and members from `cluster_of`.
  static ClusterAssignment from_labels(std::vector<int> cluster_of, std::vector<int> class_of_cluster,
                                       Eigen::MatrixXd centroids);

  /// Partition checks; with a dataset, also class purity of per-class clusters.
  void validate(const DomainDataset* dataset = nullptr) const;
};

struct ClusterOptions {
  int k = 3;
  ClusteringSpace space = ClusteringSpace::raw_input;
  std::uint64_t seed = 0;
  int max_iter = 100;
  double tol = 1e-9;
  bool per_class = true;  // false: one pooled K-means over all samples (diagnostics only)
};

/// Encoder used when clustering in z = h(x) space.
struct EncoderView {
  const ModelSpec& spec;
  const Eigen::VectorXd& theta;
};

/// K-means within each class with K_c = min(K, class size); cluster ids are
/// numbered class by class.
ClusterAssignment cluster_per_class(const DomainDataset& dataset, const ClusterOptions& options,
                                    const EncoderView* encoder = nullptr);

/// CSV with header `sample_id,class_id,cluster_id`; sample_id is the row's
/// original dataset id.
void write_assignment_csv(const ClusterAssignment& assignment, const DomainDataset& dataset,
                          const std::filesystem::path& path);

/// Inverse of write_assignment_csv. Centroids are recomputed as raw-feature
/// means since the clustering space is not stored.
ClusterAssignment read_assignment_csv(const std::filesystem::path& path, const DomainDataset& dataset);

/// Row i is the loss gradient of sample i alone.
Eigen::MatrixXd per_sample_gradients(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                     const DomainDataset& dataset);

/// Mean pairwise cosine similarity of per-sample gradients within each
/// cluster, over all pairs or 64 sampled pairs when there are more.
/// Singleton clusters report 1.
std::vector<double> gradient_coherence(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                       const DomainDataset& dataset,
                                       const ClusterAssignment& assignment, std::uint64_t seed = 0);
std::vector<double> gradient_coherence(const Eigen::MatrixXd& gradients,
                                       const ClusterAssignment& assignment, std::uint64_t seed = 0);

inline constexpr std::size_t kMaxCoherencePairs = 64;

struct ClusterGradientStats {
  Eigen::MatrixXd mu_k;      // K-dagger x P
  Eigen::VectorXd sigma2_k;  // mean squared deviation from mu_k
  Eigen::VectorXd mu;
  double sigma2 = 0.0;
};

/// Exact population statistics over all samples.
ClusterGradientStats cluster_gradient_stats(const Eigen::MatrixXd& gradients,
                                            const ClusterAssignment& assignment);
ClusterGradientStats cluster_gradient_stats(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                            const DomainDataset& dataset,
                                            const ClusterAssignment& assignment);

}  // namespace cicf
