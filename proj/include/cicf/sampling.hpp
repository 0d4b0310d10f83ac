#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cicf/clustering.hpp"
#include "cicf/data.hpp"
#include "cicf/rng.hpp"

namespace cicf {

enum class SamplerKind { stratified_proportional, stratified_equal, random, class_weighted_random };

std::string to_string(SamplerKind kind);
SamplerKind parse_sampler_kind(const std::string& name);

inline bool is_stratified(SamplerKind kind) {
  return kind == SamplerKind::stratified_proportional || kind == SamplerKind::stratified_equal;
}

/// Per-cluster draw counts N_k.
struct Allocation {
  std::vector<std::size_t> counts;

  std::size_t total() const;
  bool operator==(const Allocation&) const = default;
};

/// Largest-remainder apportionment of M over quotas M * N_k^K / N. Quotas
/// are compared in exact integer arithmetic; ties go to the lower index.
/// Counts never exceed the cluster sizes.
Allocation proportional_allocation(std::span<const std::size_t> sizes, std::size_t m);

/// floor(M / K) per cluster with the remainder going to the lowest indices.
/// When M < K only the first M clusters receive a sample.
Allocation equal_allocation(std::size_t clusters, std::size_t m);

/// Equal allocation capped at the cluster sizes; overflow is handed out
/// round-robin, lowest index first, to clusters with spare capacity.
Allocation equal_allocation(std::span<const std::size_t> sizes, std::size_t m);

/// Row indices of one mini-batch. Stratified kinds take exactly N_k rows
/// uniformly without replacement from cluster k and return them sorted;
/// `random` returns M rows without replacement in draw order;
/// `class_weighted_random` apportions M over classes proportionally and
/// draws uniformly within each class.
std::vector<std::size_t> draw_indices(const DomainDataset& dataset, const ClusterAssignment& assignment,
                                      SamplerKind kind, const Allocation* allocation, std::size_t m,
                                      Rng& rng);

Batch draw(const DomainDataset& dataset, const ClusterAssignment& assignment, SamplerKind kind,
           const Allocation* allocation, std::size_t m, Rng& rng);

std::vector<std::size_t> cluster_histogram(std::span<const std::size_t> rows,
                                           const ClusterAssignment& assignment);

struct SamplerDifference {
  std::size_t e = 0;   // sum_k |N_k - R_k|
  double ratio = 0.0;  // E / M
};

SamplerDifference sampler_difference(std::span<const std::size_t> a, std::span<const std::size_t> b);

/// Appends `iteration,k0,k1,...` rows of batch cluster histograms.
class BatchLog {
 public:
  BatchLog(std::ostream& out, std::size_t clusters);
  void record(std::size_t iteration, std::span<const std::size_t> histogram);

 private:
  std::ostream& out_;
  std::size_t clusters_;
};

}  // namespace cicf
