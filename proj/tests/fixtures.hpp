#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <vector>

#include "cicf/clustering.hpp"
#include "cicf/data.hpp"
#include "cicf/model.hpp"
#include "cicf/rng.hpp"

namespace cicf::fixtures {

inline Batch random_batch(const ModelSpec& spec, Index m, Rng& rng) {
  Batch b;
  b.features.resize(m, spec.input_dim());
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < spec.input_dim(); ++j) b.features(i, j) = rng.normal();
    b.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.class_count()))));
    b.indices.push_back(static_cast<std::size_t>(i));
  }
  return b;
}

/// Random MLP spec with at most `max_params` parameters.
inline ModelSpec random_spec(Rng& rng, Index max_params = 50) {
  for (;;) {
    ModelSpec s;
    s.layer_widths.push_back(1 + static_cast<int>(rng.below(4)));
    const int hidden = static_cast<int>(rng.below(3));
    for (int h = 0; h < hidden; ++h) s.layer_widths.push_back(1 + static_cast<int>(rng.below(4)));
    s.layer_widths.push_back(2 + static_cast<int>(rng.below(2)));
    s.activation = rng.bernoulli(0.5) ? Activation::tanh : Activation::relu;
    s.split_index = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.layer_count())));
    if (Manifest::of(s).size <= max_params) return s;
  }
}

/// Isotropic Gaussian blobs: `centers` rows are blob means; `labels[b]` is
/// blob b's class; each blob gets `per_blob` points.
inline DomainDataset blobs(const Eigen::MatrixXd& centers, const std::vector<int>& labels, int per_blob,
                           double spread, std::uint64_t seed, int classes) {
  Rng rng(seed);
  DomainDataset d;
  const Index dim = centers.cols();
  d.features.resize(centers.rows() * per_blob, dim);
  d.class_count = classes;
  d.domain_count = 1;
  Index row = 0;
  for (Index b = 0; b < centers.rows(); ++b)
    for (int i = 0; i < per_blob; ++i, ++row) {
      for (Index j = 0; j < dim; ++j) d.features(row, j) = centers(b, j) + spread * rng.normal();
      d.labels.push_back(labels[static_cast<std::size_t>(b)]);
      d.domains.push_back(0);
      d.ids.push_back(static_cast<std::size_t>(row));
    }
  return d;
}

/// Assignment from a per-row blob index (ground truth), one cluster per blob.
inline ClusterAssignment assignment_from(const std::vector<int>& cluster_of, const std::vector<int>& class_of_cluster,
                                         Index dim) {
  return ClusterAssignment::from_labels(cluster_of, class_of_cluster,
                                        Eigen::MatrixXd::Zero(static_cast<Index>(class_of_cluster.size()), dim));
}

/// One class per stratum, rows in stratum order; feature = row index.
struct Stratified {
  DomainDataset data;
  ClusterAssignment assignment;
};

inline Stratified strata(const std::vector<std::size_t>& sizes) {
  Stratified s;
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  s.data.features = Eigen::MatrixXd::Zero(static_cast<Index>(n), 1);
  s.data.class_count = static_cast<int>(sizes.size());
  s.data.domain_count = 1;
  std::vector<int> cluster_of;
  std::vector<int> class_of;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    class_of.push_back(static_cast<int>(k));
    for (std::size_t i = 0; i < sizes[k]; ++i) {
      s.data.features(static_cast<Index>(cluster_of.size()), 0) = static_cast<double>(cluster_of.size());
      s.data.labels.push_back(static_cast<int>(k));
      s.data.domains.push_back(0);
      s.data.ids.push_back(cluster_of.size());
      cluster_of.push_back(static_cast<int>(k));
    }
  }
  s.assignment = fixtures::assignment_from(cluster_of, class_of, 1);
  return s;
}

}  // namespace cicf::fixtures
