#include "cicf/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace cicf {

void DomainDataset::validate() const {
  const std::size_t n = labels.size();
  if (n == 0) throw DataError("dataset is empty");
  if (static_cast<std::size_t>(features.rows()) != n || domains.size() != n || ids.size() != n)
    throw DataError("dataset columns have inconsistent lengths");
  if (features.cols() < 1) throw DataError("dataset has no feature columns");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= class_count)
      throw DataError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                      " outside [0, " + std::to_string(class_count) + ")");
    if (domains[i] < 0 || domains[i] >= domain_count)
      throw DataError("domain " + std::to_string(domains[i]) + " of sample " + std::to_string(i) +
                      " outside [0, " + std::to_string(domain_count) + ")");
  }
}

DomainDataset DomainDataset::subset(const std::vector<std::size_t>& rows) const {
  DomainDataset out;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  out.class_count = class_count;
  out.domain_count = domain_count;
  out.normalization = normalization;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = features.row(static_cast<Index>(rows[i]));
    out.labels.push_back(labels.at(rows[i]));
    out.domains.push_back(domains[rows[i]]);
    out.ids.push_back(ids[rows[i]]);
  }
  return out;
}

Batch DomainDataset::batch(const std::vector<std::size_t>& rows) const {
  Batch b;
  b.features.resize(static_cast<Index>(rows.size()), features.cols());
  b.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.features.row(static_cast<Index>(i)) = features.row(static_cast<Index>(rows[i]));
    b.labels.push_back(labels.at(rows[i]));
  }
  b.indices = rows;
  return b;
}

Batch DomainDataset::all() const {
  Batch b;
  b.features = features;
  b.labels = labels;
  b.indices.resize(size());
  for (std::size_t i = 0; i < size(); ++i) b.indices[i] = i;
  return b;
}

std::vector<std::size_t> DomainDataset::rows_of_class(int label) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < size(); ++i)
    if (labels[i] == label) rows.push_back(i);
  return rows;
}

std::vector<std::size_t> DomainDataset::rows_of_domain(int domain) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < size(); ++i)
    if (domains[i] == domain) rows.push_back(i);
  return rows;
}

std::vector<std::size_t> DomainDataset::class_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(class_count), 0);
  for (int y : labels) ++sizes[static_cast<std::size_t>(y)];
  return sizes;
}

std::vector<int> DomainDataset::present_domains() const {
  std::set<int> s(domains.begin(), domains.end());
  return {s.begin(), s.end()};
}

bool DomainDataset::operator==(const DomainDataset& other) const {
  return features == other.features && labels == other.labels && domains == other.domains &&
         class_count == other.class_count && domain_count == other.domain_count;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SyntheticDomainSpec::validate() const {
  if (class_count < 2) throw ConfigError("generator: class_count must be at least 2");
  if (causal_dims < 1) throw ConfigError("generator: causal_dims must be at least 1");
  if (confounder_dims < 0) throw ConfigError("generator: confounder_dims must be non-negative");
  if (domains.size() < 2) throw ConfigError("generator: at least 2 domains required");
  if (!(noise_std >= 0.0)) throw ConfigError("generator: noise_std must be non-negative");
  const double k = class_count;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const double rho = domains[d].rho;
    if (!(rho >= -1.0 && rho <= 1.0))
      throw ConfigError("generator: domain " + std::to_string(d) + " rho outside [-1, 1]");
    const double agree = 1.0 / k + rho * (1.0 - 1.0 / k);
    if (agree < 0.0)
      throw ConfigError("generator: domain " + std::to_string(d) +
                        " rho below -1/(class_count-1) is not realizable");
    if (domains[d].samples_per_class < 1)
      throw ConfigError("generator: domain " + std::to_string(d) + " needs samples_per_class >= 1");
  }
}

namespace {

// Class means with pairwise distance `separation`. Two classes sit at
// +-separation/2 along the diagonal; more classes use scaled unit vectors
// when there are enough dimensions, else seeded random directions.
Eigen::MatrixXd class_codes(int classes, int dims, double separation, std::uint64_t seed) {
  Eigen::MatrixXd codes = Eigen::MatrixXd::Zero(classes, dims);
  if (dims == 0) return codes;
  if (classes == 2) {
    const double v = separation / (2.0 * std::sqrt(static_cast<double>(dims)));
    codes.row(0).setConstant(-v);
    codes.row(1).setConstant(v);
  } else if (dims >= classes) {
    for (int c = 0; c < classes; ++c) codes(c, c) = separation / std::sqrt(2.0);
  } else {
    Rng rng(seed);
    for (int c = 0; c < classes; ++c) {
      for (int j = 0; j < dims; ++j) codes(c, j) = rng.normal();
      codes.row(c) *= (separation / std::sqrt(2.0)) / codes.row(c).norm();
    }
  }
  return codes;
}

}  // namespace

DomainDataset generate(const SyntheticDomainSpec& spec) {
  spec.validate();
  const int k = spec.class_count;
  const Eigen::MatrixXd causal = class_codes(k, spec.causal_dims, spec.causal_separation,
                                             derive_seed(spec.seed, 1));
  const Eigen::MatrixXd confounder =
      class_codes(k, spec.confounder_dims,
                  2.0 * spec.confounder_scale * std::sqrt(static_cast<double>(spec.confounder_dims)),
                  derive_seed(spec.seed, 2));

  std::size_t total = 0;
  for (const auto& d : spec.domains) total += static_cast<std::size_t>(d.samples_per_class) * k;

  DomainDataset out;
  const int dim = spec.causal_dims + spec.confounder_dims;
  out.features.resize(static_cast<Index>(total), dim);
  out.class_count = k;
  out.domain_count = static_cast<int>(spec.domains.size());

  Rng rng(derive_seed(spec.seed, 0));
  std::size_t row = 0;
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    const double agree = 1.0 / k + spec.domains[d].rho * (1.0 - 1.0 / k);
    for (int c = 0; c < k; ++c) {
      for (int i = 0; i < spec.domains[d].samples_per_class; ++i, ++row) {
        auto x = out.features.row(static_cast<Index>(row));
        for (int j = 0; j < spec.causal_dims; ++j)
          x(j) = causal(c, j) + spec.noise_std * rng.normal();
        int shown = c;
        if (!rng.bernoulli(agree)) {
          shown = static_cast<int>(rng.below(static_cast<std::uint64_t>(k - 1)));
          if (shown >= c) ++shown;
        }
        for (int j = 0; j < spec.confounder_dims; ++j)
          x(spec.causal_dims + j) = confounder(shown, j) + spec.noise_std * rng.normal();
        out.labels.push_back(c);
        out.domains.push_back(static_cast<int>(d));
        out.ids.push_back(row);
      }
    }
  }
  return out;
}

SyntheticDomainSpec preset(const std::string& name) {
  SyntheticDomainSpec s;
  if (name == "confounded-3") {
    s.class_count = 2;
    s.causal_dims = 2;
    s.confounder_dims = 2;
    s.causal_separation = 2.0;
    s.noise_std = 1.0;
    s.confounder_scale = 3.0;
    s.domains = {{0.9, 100}, {0.9, 100}, {0.0, 100}};
  } else if (name == "pacs-like") {
    s.class_count = 7;
    s.causal_dims = 8;
    s.confounder_dims = 4;
    s.causal_separation = 3.0;
    s.noise_std = 1.0;
    s.confounder_scale = 1.5;
    s.domains = {{0.8, 40}, {0.6, 40}, {0.4, 40}, {0.0, 40}};
  } else if (name == "separated-3") {
    s.class_count = 3;
    s.causal_dims = 3;
    s.confounder_dims = 0;
    s.causal_separation = 8.0;
    s.noise_std = 0.5;
    s.confounder_scale = 0.0;
    s.domains = {{0.0, 20}, {0.0, 20}};
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return s;
}

std::vector<std::string> preset_names() { return {"confounded-3", "pacs-like", "separated-3"}; }

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& text, double& out) {
  const char* first = text.data();
  const char* last = first + text.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && first != last;
}

bool parse_int(const std::string& text, int& out) {
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && first != last;
}

}  // namespace

DomainDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (!trim(line).empty()) {
      header = split_line(line);
      break;
    }
  }
  if (header.empty()) throw DataError(path.string() + ": empty file");

  int label_col = -1, domain_col = -1;
  std::vector<int> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = trim(header[c]);
    if (name == schema.label_column) label_col = static_cast<int>(c);
    else if (name == schema.domain_column) domain_col = static_cast<int>(c);
    else feature_cols.push_back(static_cast<int>(c));
  }
  if (label_col < 0)
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing label column '" +
                    schema.label_column + "'");
  if (domain_col < 0)
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing domain column '" +
                    schema.domain_column + "'");
  if (feature_cols.empty())
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": no feature columns");

  std::vector<double> values;
  DomainDataset out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (cells.size() != header.size())
      throw DataError(where + "expected " + std::to_string(header.size()) + " cells, found " +
                      std::to_string(cells.size()));
    for (int c : feature_cols) {
      const std::string cell = trim(cells[static_cast<std::size_t>(c)]);
      if (cell.empty()) throw DataError(where + "missing value in column '" + trim(header[c]) + "'");
      double v;
      if (!parse_double(cell, v) || !std::isfinite(v))
        throw DataError(where + "non-numeric value '" + cell + "' in column '" + trim(header[c]) + "'");
      values.push_back(v);
    }
    int label, domain;
    const std::string label_cell = trim(cells[static_cast<std::size_t>(label_col)]);
    const std::string domain_cell = trim(cells[static_cast<std::size_t>(domain_col)]);
    if (!parse_int(label_cell, label) || label < 0 ||
        (schema.class_count && label >= *schema.class_count))
      throw DataError(where + "unknown label value '" + label_cell + "'");
    if (!parse_int(domain_cell, domain) || domain < 0 ||
        (schema.domain_count && domain >= *schema.domain_count))
      throw DataError(where + "unknown domain value '" + domain_cell + "'");
    out.labels.push_back(label);
    out.domains.push_back(domain);
    out.ids.push_back(out.ids.size());
  }
  if (out.labels.empty()) throw DataError(path.string() + ": no data rows");

  const auto n = static_cast<Index>(out.labels.size());
  const auto d = static_cast<Index>(feature_cols.size());
  out.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), n, d);
  out.class_count = schema.class_count.value_or(*std::max_element(out.labels.begin(), out.labels.end()) + 1);
  out.domain_count =
      schema.domain_count.value_or(*std::max_element(out.domains.begin(), out.domains.end()) + 1);
  return out;
}

void save_csv(const DomainDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (Index j = 0; j < dataset.feature_dim(); ++j) out << 'f' << j << ',';
  out << "label,domain\n";
  char buf[64];
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (Index j = 0; j < dataset.feature_dim(); ++j) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, dataset.features(static_cast<Index>(i), j));
      out.write(buf, ptr - buf);
      out << ',';
    }
    out << dataset.labels[i] << ',' << dataset.domains[i] << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Splits

NormalizationStats fit_normalization(const Eigen::MatrixXd& features) {
  NormalizationStats stats;
  stats.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - stats.mean.transpose();
  stats.stddev = (centered.colwise().squaredNorm() / static_cast<double>(features.rows()))
                     .cwiseSqrt()
                     .transpose();
  for (Index j = 0; j < stats.stddev.size(); ++j)
    if (stats.stddev(j) < 1e-12) stats.stddev(j) = 1.0;
  return stats;
}

void apply_normalization(DomainDataset& dataset, const NormalizationStats& stats) {
  if (stats.mean.size() != dataset.feature_dim())
    throw ShapeError("normalization statistics do not match feature dimension");
  dataset.features = ((dataset.features.rowwise() - stats.mean.transpose()).array().rowwise() /
                      stats.stddev.transpose().array())
                         .matrix();
  dataset.normalization = stats;
}

std::pair<DomainDataset, DomainDataset> leave_one_domain_out(const DomainDataset& dataset,
                                                             int test_domain) {
  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    (dataset.domains[i] == test_domain ? test_rows : train_rows).push_back(i);
  if (test_rows.empty())
    throw ConfigError("test domain " + std::to_string(test_domain) + " not present in dataset");
  if (train_rows.empty()) throw ConfigError("leaving out domain " + std::to_string(test_domain) +
                                            " leaves no training data");
  DomainDataset train = dataset.subset(train_rows);
  DomainDataset test = dataset.subset(test_rows);
  NormalizationStats stats = fit_normalization(train.features);
  stats.fitted_on = "train";
  apply_normalization(train, stats);
  apply_normalization(test, stats);
  return {std::move(train), std::move(test)};
}

}  // namespace cicf
