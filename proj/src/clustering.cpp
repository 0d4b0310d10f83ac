#include "cicf/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "cicf/errors.hpp"
#include "cicf/rng.hpp"

namespace cicf {

namespace {

Eigen::MatrixXd kmeans_pp_seed(const Eigen::MatrixXd& points, int k, Rng& rng) {
  const Index n = points.rows();
  Eigen::MatrixXd centroids(k, points.cols());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  Index first = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
  centroids.row(0) = points.row(first);
  chosen[static_cast<std::size_t>(first)] = true;
  Eigen::VectorXd d2 = (points.rowwise() - points.row(first)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Index pick = -1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (d2(i) > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick < 0)  // rounding at the upper end
        for (Index i = n - 1; i >= 0 && pick < 0; --i)
          if (d2(i) > 0.0) pick = i;
    } else {
      // every point coincides with a centroid: take the lowest unused row
      for (Index i = 0; i < n && pick < 0; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) pick = i;
    }
    centroids.row(c) = points.row(pick);
    chosen[static_cast<std::size_t>(pick)] = true;
    d2 = d2.cwiseMin((points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }
  return centroids;
}

double assignment_cost(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids,
                       const std::vector<int>& labels) {
  double cost = 0.0;
  for (Index i = 0; i < points.rows(); ++i)
    cost += (points.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return cost;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter,
                    double tol) {
  const Index n = points.rows();
  if (n == 0) throw ConfigError("kmeans: no points");
  if (k < 1) throw ConfigError("kmeans: K must be positive");
  if (k > n)
    throw ConfigError("kmeans: K=" + std::to_string(k) + " exceeds point count " + std::to_string(n));
  if (max_iter < 1) throw ConfigError("kmeans: max_iter must be positive");

  Rng rng(seed);
  KMeansResult out;
  out.centroids = kmeans_pp_seed(points, k, rng);
  out.labels.assign(static_cast<std::size_t>(n), 0);

  for (int it = 0; it < max_iter; ++it) {
    // assignment, ties to the lowest centroid index
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    Eigen::VectorXd own_d2(n);
    for (Index i = 0; i < n; ++i) {
      Index best;
      own_d2(i) = (out.centroids.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
      out.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
      ++counts[static_cast<std::size_t>(best)];
    }
    // empty-cluster repair
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      Index far = -1;
      for (Index i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(out.labels[static_cast<std::size_t>(i)])] < 2) continue;
        if (far < 0 || own_d2(i) > own_d2(far)) far = i;
      }
      --counts[static_cast<std::size_t>(out.labels[static_cast<std::size_t>(far)])];
      out.labels[static_cast<std::size_t>(far)] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      own_d2(far) = 0.0;
      out.centroids.row(c) = points.row(far);
    }
    // update
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, points.cols());
    for (Index i = 0; i < n; ++i) next.row(out.labels[static_cast<std::size_t>(i)]) += points.row(i);
    for (int c = 0; c < k; ++c) next.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
    const double shift = (next - out.centroids).rowwise().norm().maxCoeff();
    out.centroids = std::move(next);
    out.inertia = assignment_cost(points, out.centroids, out.labels);
    out.inertia_history.push_back(out.inertia);
    out.iterations = it + 1;
    if (shift < tol) break;
  }
  return out;
}

ClusterAssignment ClusterAssignment::from_labels(std::vector<int> cluster_of,
                                                 std::vector<int> class_of_cluster,
                                                 Eigen::MatrixXd centroids) {
  ClusterAssignment a;
  const std::size_t k = class_of_cluster.size();
  a.cluster_of = std::move(cluster_of);
  a.class_of_cluster = std::move(class_of_cluster);
  a.centroids = std::move(centroids);
  a.sizes.assign(k, 0);
  a.members.assign(k, {});
  for (std::size_t i = 0; i < a.cluster_of.size(); ++i) {
    const int c = a.cluster_of[i];
    if (c < 0 || static_cast<std::size_t>(c) >= k)
      throw DataError("cluster id " + std::to_string(c) + " of sample " + std::to_string(i) +
                      " out of range");
    ++a.sizes[static_cast<std::size_t>(c)];
    a.members[static_cast<std::size_t>(c)].push_back(i);
  }
  const double n = static_cast<double>(a.cluster_of.size());
  for (std::size_t s : a.sizes) a.weights.push_back(static_cast<double>(s) / n);
  return a;
}

void ClusterAssignment::validate(const DomainDataset* dataset) const {
  std::size_t total = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    if (sizes[c] == 0) throw DataError("cluster " + std::to_string(c) + " is empty");
    if (members[c].size() != sizes[c]) throw DataError("cluster membership inconsistent");
    total += sizes[c];
  }
  if (total != cluster_of.size()) throw DataError("cluster sizes do not sum to sample count");
  if (dataset) {
    if (dataset->size() != cluster_of.size())
      throw DataError("assignment covers " + std::to_string(cluster_of.size()) +
                      " samples, dataset has " + std::to_string(dataset->size()));
    for (std::size_t i = 0; i < cluster_of.size(); ++i) {
      const int owner = class_of_cluster[static_cast<std::size_t>(cluster_of[i])];
      if (owner >= 0 && owner != dataset->labels[i])
        throw DataError("cluster " + std::to_string(cluster_of[i]) + " spans classes");
    }
  }
}

ClusterAssignment cluster_per_class(const DomainDataset& dataset, const ClusterOptions& options,
                                    const EncoderView* encoder) {
  if (dataset.size() == 0) throw DataError("cluster_per_class: empty dataset");
  if (options.k < 1) throw ConfigError("clustering.K must be at least 1");

  Eigen::MatrixXd space;
  if (options.space == ClusteringSpace::encoder_output) {
    if (!encoder) throw ConfigError("clustering in encoder space requires encoder parameters");
    space = forward_batch(encoder->spec, encoder->theta, dataset.features).z;
  } else {
    space = dataset.features;
  }

  std::vector<int> cluster_of(dataset.size(), -1);
  std::vector<int> class_of_cluster;
  std::vector<Eigen::RowVectorXd> centroid_rows;
  std::vector<int> clamped;

  auto run = [&](const std::vector<std::size_t>& rows, int owner, std::uint64_t seed) {
    const int k = std::min<int>(options.k, static_cast<int>(rows.size()));
    if (k < options.k) clamped.push_back(owner);
    Eigen::MatrixXd pts(static_cast<Index>(rows.size()), space.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Index>(i)) = space.row(static_cast<Index>(rows[i]));
    const KMeansResult km = kmeans(pts, k, seed, options.max_iter, options.tol);
    const int base = static_cast<int>(class_of_cluster.size());
    for (int c = 0; c < k; ++c) {
      class_of_cluster.push_back(owner);
      centroid_rows.push_back(km.centroids.row(c));
    }
    for (std::size_t i = 0; i < rows.size(); ++i) cluster_of[rows[i]] = base + km.labels[i];
  };

  if (options.per_class) {
    for (int c = 0; c < dataset.class_count; ++c) {
      const auto rows = dataset.rows_of_class(c);
      if (rows.empty()) continue;
      run(rows, c, derive_seed(options.seed, static_cast<std::uint64_t>(c)));
    }
  } else {
    std::vector<std::size_t> rows(dataset.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    run(rows, -1, derive_seed(options.seed, 0));
  }

  Eigen::MatrixXd centroids(static_cast<Index>(centroid_rows.size()), space.cols());
  for (std::size_t c = 0; c < centroid_rows.size(); ++c) centroids.row(static_cast<Index>(c)) = centroid_rows[c];
  ClusterAssignment a = ClusterAssignment::from_labels(std::move(cluster_of), std::move(class_of_cluster),
                                                       std::move(centroids));
  a.clamped_classes = std::move(clamped);
  a.validate(&dataset);
  return a;
}

void write_assignment_csv(const ClusterAssignment& assignment, const DomainDataset& dataset,
                          const std::filesystem::path& path) {
  if (assignment.sample_count() != dataset.size())
    throw ShapeError("assignment and dataset sizes differ");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "sample_id,class_id,cluster_id\n";
  for (std::size_t i = 0; i < dataset.size(); ++i)
    out << dataset.ids[i] << ',' << dataset.labels[i] << ',' << assignment.cluster_of[i] << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ClusterAssignment read_assignment_csv(const std::filesystem::path& path, const DomainDataset& dataset) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "sample_id,class_id,cluster_id")
    throw DataError(path.string() + ":1: unexpected header '" + line + "'");

  std::map<std::size_t, std::size_t> row_of_id;
  for (std::size_t i = 0; i < dataset.size(); ++i) row_of_id[dataset.ids[i]] = i;

  std::vector<int> cluster_of(dataset.size(), -1);
  std::map<int, int> class_of;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::size_t id;
    int cls, cluster;
    char c1, c2;
    if (!(cells >> id >> c1 >> cls >> c2 >> cluster) || c1 != ',' || c2 != ',' || cluster < 0)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    auto it = row_of_id.find(id);
    if (it == row_of_id.end() || dataset.labels[it->second] != cls)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": sample " + std::to_string(id) +
                      " does not match the dataset");
    cluster_of[it->second] = cluster;
    auto [pos, fresh] = class_of.emplace(cluster, cls);
    if (!fresh && pos->second != cls) pos->second = -1;
  }
  for (std::size_t i = 0; i < cluster_of.size(); ++i)
    if (cluster_of[i] < 0)
      throw DataError(path.string() + ": sample " + std::to_string(dataset.ids[i]) + " has no cluster");
  const int k = class_of.rbegin()->first + 1;
  std::vector<int> class_of_cluster(static_cast<std::size_t>(k), -1);
  for (auto [c, cls] : class_of) class_of_cluster[static_cast<std::size_t>(c)] = cls;

  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(k, dataset.feature_dim());
  ClusterAssignment a = ClusterAssignment::from_labels(std::move(cluster_of), std::move(class_of_cluster),
                                                       std::move(centroids));
  for (std::size_t i = 0; i < dataset.size(); ++i)
    a.centroids.row(a.cluster_of[i]) += dataset.features.row(static_cast<Index>(i));
  for (int c = 0; c < k; ++c)
    if (a.sizes[static_cast<std::size_t>(c)] > 0)
      a.centroids.row(c) /= static_cast<double>(a.sizes[static_cast<std::size_t>(c)]);
  a.validate(&dataset);
  return a;
}

Eigen::MatrixXd per_sample_gradients(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                     const DomainDataset& dataset) {
  Eigen::MatrixXd g(static_cast<Index>(dataset.size()), theta.size());
  for (std::size_t i = 0; i < dataset.size(); ++i)
    g.row(static_cast<Index>(i)) = loss_and_grad(spec, theta, dataset.batch({i})).grad.transpose();
  return g;
}

namespace {

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace

std::vector<double> gradient_coherence(const Eigen::MatrixXd& gradients,
                                       const ClusterAssignment& assignment, std::uint64_t seed) {
  std::vector<double> out;
  for (std::size_t c = 0; c < assignment.cluster_count(); ++c) {
    const auto& rows = assignment.members[c];
    const std::size_t n = rows.size();
    if (n < 2) {
      out.push_back(1.0);
      continue;
    }
    const std::size_t pairs = n * (n - 1) / 2;
    double sum = 0.0;
    std::size_t used = 0;
    auto add = [&](std::size_t i, std::size_t j) {
      sum += cosine(gradients.row(static_cast<Index>(rows[i])).transpose(),
                    gradients.row(static_cast<Index>(rows[j])).transpose());
      ++used;
    };
    if (pairs <= kMaxCoherencePairs) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) add(i, j);
    } else {
      Rng rng(derive_seed(seed, c));
      for (std::size_t p = 0; p < kMaxCoherencePairs; ++p) {
        const auto pick = rng.sample_without_replacement(n, 2);
        add(pick[0], pick[1]);
      }
    }
    out.push_back(sum / static_cast<double>(used));
  }
  return out;
}

std::vector<double> gradient_coherence(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                       const DomainDataset& dataset,
                                       const ClusterAssignment& assignment, std::uint64_t seed) {
  return gradient_coherence(per_sample_gradients(spec, theta, dataset), assignment, seed);
}

ClusterGradientStats cluster_gradient_stats(const Eigen::MatrixXd& gradients,
                                            const ClusterAssignment& assignment) {
  if (static_cast<std::size_t>(gradients.rows()) != assignment.sample_count())
    throw ShapeError("gradient rows do not match assignment size");
  const Index k = static_cast<Index>(assignment.cluster_count());
  ClusterGradientStats s;
  s.mu = gradients.colwise().mean().transpose();
  s.sigma2 = (gradients.rowwise() - s.mu.transpose()).rowwise().squaredNorm().mean();
  s.mu_k.resize(k, gradients.cols());
  s.sigma2_k.resize(k);
  for (Index c = 0; c < k; ++c) {
    const auto& rows = assignment.members[static_cast<std::size_t>(c)];
    Eigen::MatrixXd block(static_cast<Index>(rows.size()), gradients.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) block.row(static_cast<Index>(i)) = gradients.row(static_cast<Index>(rows[i]));
    s.mu_k.row(c) = block.colwise().mean();
    s.sigma2_k(c) = (block.rowwise() - s.mu_k.row(c)).rowwise().squaredNorm().mean();
  }
  return s;
}

ClusterGradientStats cluster_gradient_stats(const ModelSpec& spec, const Eigen::VectorXd& theta,
                                            const DomainDataset& dataset,
                                            const ClusterAssignment& assignment) {
  return cluster_gradient_stats(per_sample_gradients(spec, theta, dataset), assignment);
}

}  // namespace cicf
