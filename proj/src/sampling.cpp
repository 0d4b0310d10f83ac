#include "cicf/sampling.hpp"

#include <algorithm>
#include <numeric>

#include "cicf/errors.hpp"

namespace cicf {

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::stratified_proportional: return "stratified_proportional";
    case SamplerKind::stratified_equal: return "stratified_equal";
    case SamplerKind::random: return "random";
    case SamplerKind::class_weighted_random: return "class_weighted_random";
  }
  return "unknown";
}

SamplerKind parse_sampler_kind(const std::string& name) {
  for (auto k : {SamplerKind::stratified_proportional, SamplerKind::stratified_equal,
                 SamplerKind::random, SamplerKind::class_weighted_random})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown sampler kind '" + name + "'");
}

std::size_t Allocation::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

Allocation proportional_allocation(std::span<const std::size_t> sizes, std::size_t m) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (sizes.empty() || n == 0) throw ConfigError("proportional_allocation: no clusters");
  if (m < 1) throw ConfigError("proportional_allocation: M must be at least 1");
  if (m > n)
    throw ConfigError("proportional_allocation: M=" + std::to_string(m) + " exceeds population " +
                      std::to_string(n));

  const std::size_t k = sizes.size();
  Allocation a;
  a.counts.resize(k);
  std::vector<std::size_t> remainder(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    a.counts[i] = m * sizes[i] / n;
    remainder[i] = m * sizes[i] % n;
    assigned += a.counts[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return remainder[x] > remainder[y]; });
  for (std::size_t r = 0; assigned < m; ++r, ++assigned) ++a.counts[order[r % k]];

  // cap at cluster sizes, re-offering overflow in the same priority order
  std::size_t overflow = 0;
  for (std::size_t i = 0; i < k; ++i)
    if (a.counts[i] > sizes[i]) {
      overflow += a.counts[i] - sizes[i];
      a.counts[i] = sizes[i];
    }
  for (std::size_t r = 0; overflow > 0; ++r) {
    const std::size_t i = order[r % k];
    if (a.counts[i] < sizes[i]) {
      ++a.counts[i];
      --overflow;
    }
  }
  return a;
}

Allocation equal_allocation(std::size_t clusters, std::size_t m) {
  if (clusters == 0) throw ConfigError("equal_allocation: no clusters");
  Allocation a;
  a.counts.assign(clusters, m / clusters);
  for (std::size_t i = 0; i < m % clusters; ++i) ++a.counts[i];
  return a;
}

Allocation equal_allocation(std::span<const std::size_t> sizes, std::size_t m) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (m > n)
    throw ConfigError("equal_allocation: M=" + std::to_string(m) + " exceeds population " +
                      std::to_string(n));
  Allocation a = equal_allocation(sizes.size(), m);
  std::size_t overflow = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i)
    if (a.counts[i] > sizes[i]) {
      overflow += a.counts[i] - sizes[i];
      a.counts[i] = sizes[i];
    }
  for (std::size_t r = 0; overflow > 0; ++r) {
    const std::size_t i = r % sizes.size();
    if (a.counts[i] < sizes[i]) {
      ++a.counts[i];
      --overflow;
    }
  }
  return a;
}

std::vector<std::size_t> draw_indices(const DomainDataset& dataset, const ClusterAssignment& assignment,
                                      SamplerKind kind, const Allocation* allocation, std::size_t m,
                                      Rng& rng) {
  std::vector<std::size_t> rows;
  if (is_stratified(kind)) {
    if (!allocation) throw ConfigError("stratified sampling requires an allocation");
    if (allocation->counts.size() != assignment.cluster_count())
      throw AllocationError("allocation covers " + std::to_string(allocation->counts.size()) +
                            " clusters, assignment has " + std::to_string(assignment.cluster_count()));
    rows.reserve(allocation->total());
    for (std::size_t c = 0; c < assignment.cluster_count(); ++c) {
      const std::size_t want = allocation->counts[c];
      if (want > assignment.sizes[c])
        throw AllocationError("cluster " + std::to_string(c) + " has " +
                              std::to_string(assignment.sizes[c]) + " samples, " + std::to_string(want) +
                              " requested");
      if (want == 0) continue;
      const auto picked = rng.sample_from(assignment.members[c], want);
      rows.insert(rows.end(), picked.begin(), picked.end());
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  }

  if (m < 1 || m > dataset.size())
    throw ConfigError("batch size " + std::to_string(m) + " outside [1, " +
                      std::to_string(dataset.size()) + "]");
  if (kind == SamplerKind::random) return rng.sample_without_replacement(dataset.size(), m);

  const auto class_sizes = dataset.class_sizes();
  std::vector<std::size_t> present;
  std::vector<int> present_class;
  for (int c = 0; c < dataset.class_count; ++c)
    if (class_sizes[static_cast<std::size_t>(c)] > 0) {
      present.push_back(class_sizes[static_cast<std::size_t>(c)]);
      present_class.push_back(c);
    }
  const Allocation per_class = proportional_allocation(present, m);
  for (std::size_t i = 0; i < present.size(); ++i) {
    if (per_class.counts[i] == 0) continue;
    const auto picked = rng.sample_from(dataset.rows_of_class(present_class[i]), per_class.counts[i]);
    rows.insert(rows.end(), picked.begin(), picked.end());
  }
  return rows;
}

Batch draw(const DomainDataset& dataset, const ClusterAssignment& assignment, SamplerKind kind,
           const Allocation* allocation, std::size_t m, Rng& rng) {
  return dataset.batch(draw_indices(dataset, assignment, kind, allocation, m, rng));
}

std::vector<std::size_t> cluster_histogram(std::span<const std::size_t> rows,
                                           const ClusterAssignment& assignment) {
  std::vector<std::size_t> h(assignment.cluster_count(), 0);
  for (std::size_t r : rows) ++h[static_cast<std::size_t>(assignment.cluster_of.at(r))];
  return h;
}

SamplerDifference sampler_difference(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw ConfigError("sampler_difference: histograms cover different clusters");
  const std::size_t ta = std::accumulate(a.begin(), a.end(), std::size_t{0});
  const std::size_t tb = std::accumulate(b.begin(), b.end(), std::size_t{0});
  if (ta != tb)
    throw ConfigError("sampler_difference: batch totals differ (" + std::to_string(ta) + " vs " +
                      std::to_string(tb) + ")");
  SamplerDifference d;
  for (std::size_t i = 0; i < a.size(); ++i) d.e += a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
  d.ratio = ta == 0 ? 0.0 : static_cast<double>(d.e) / static_cast<double>(ta);
  return d;
}

BatchLog::BatchLog(std::ostream& out, std::size_t clusters) : out_(out), clusters_(clusters) {
  out_ << "iteration";
  for (std::size_t c = 0; c < clusters_; ++c) out_ << ",k" << c;
  out_ << '\n';
}

void BatchLog::record(std::size_t iteration, std::span<const std::size_t> histogram) {
  if (histogram.size() != clusters_) throw ShapeError("batch log: histogram width mismatch");
  out_ << iteration;
  for (std::size_t v : histogram) out_ << ',' << v;
  out_ << '\n';
}

}  // namespace cicf
