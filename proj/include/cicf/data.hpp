#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cicf/model.hpp"

namespace cicf {

/// Per-feature affine normalization, with the split it was fitted on.
struct NormalizationStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
  std::string fitted_on;  // "train" for leave-one-domain-out splits
};

/// Labeled samples with domain tags. Rows of `features` are samples;
/// `ids` holds each row's id in the dataset it was originally loaded from.
struct DomainDataset {
  Eigen::MatrixXd features;
  std::vector<int> labels;
  std::vector<int> domains;
  std::vector<std::size_t> ids;
  int class_count = 0;
  int domain_count = 0;
  std::optional<NormalizationStats> normalization;

  std::size_t size() const { return labels.size(); }
  Index feature_dim() const { return features.cols(); }

  /// Throws DataError when the invariants do not hold.
  void validate() const;

  DomainDataset subset(const std::vector<std::size_t>& rows) const;

  /// Batch of the given rows; batch indices are row positions in this dataset.
  Batch batch(const std::vector<std::size_t>& rows) const;
  Batch all() const;

  std::vector<std::size_t> rows_of_class(int label) const;
  std::vector<std::size_t> rows_of_domain(int domain) const;
  std::vector<std::size_t> class_sizes() const;
  std::vector<int> present_domains() const;

  bool operator==(const DomainDataset& other) const;
};

struct DomainConfig {
  double rho = 0.0;  // confounder/label correlation in this domain
  int samples_per_class = 100;
};

/// Gaussian-mixture generator with a label-correlated confounder channel.
/// Features are [causal | confounder]. Causal class means are
/// `causal_separation` apart; each sample's confounder mean is the code of
/// a "confounder class" that equals the true label with probability
/// 1/K + rho (1 - 1/K) and is otherwise uniform over the other classes
/// (for two classes: sign agreement with probability (1 + rho) / 2).
struct SyntheticDomainSpec {
  int class_count = 2;
  int causal_dims = 2;
  int confounder_dims = 2;
  std::vector<DomainConfig> domains;
  double causal_separation = 2.0;
  double noise_std = 1.0;
  double confounder_scale = 3.0;  // per-dimension magnitude of confounder means
  std::uint64_t seed = 0;

  void validate() const;
};

DomainDataset generate(const SyntheticDomainSpec& spec);

/// Named generator presets: "confounded-3", "pacs-like", "separated-3".
SyntheticDomainSpec preset(const std::string& name);
std::vector<std::string> preset_names();

struct CsvSchema {
  std::string label_column = "label";
  std::string domain_column = "domain";
  std::optional<int> class_count;   // labels >= this are rejected
  std::optional<int> domain_count;  // domains >= this are rejected
};

/// Reads `f0,...,label,domain`-style CSV. DataError messages cite the
/// 1-based file line.
DomainDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});

/// Writes header `f0,f1,...,label,domain`; floats in shortest round-trip form.
void save_csv(const DomainDataset& dataset, const std::filesystem::path& path);

/// Disjoint split by domain tag. Both halves are normalized with statistics
/// fitted on the training half.
std::pair<DomainDataset, DomainDataset> leave_one_domain_out(const DomainDataset& dataset,
                                                             int test_domain);

NormalizationStats fit_normalization(const Eigen::MatrixXd& features);
void apply_normalization(DomainDataset& dataset, const NormalizationStats& stats);

}  // namespace cicf
