#pragma once

// Experiment configuration for the cicf-lab runner: a JSON document with
// sections data, model, clustering, training, analysis, evaluation, output
// and seeds. Unknown keys are rejected by dotted path.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cicf/clustering.hpp"
#include "cicf/data.hpp"
#include "cicf/model.hpp"
#include "cicf/trainers.hpp"

namespace cicf::lab {

enum class Method { erm, maml, cicf };

std::string to_string(Method m);
Method parse_method(const std::string& s);

struct CsvSource {
  std::string path;
  CsvSchema schema;
};

struct DataConfig {
  std::optional<SyntheticDomainSpec> generator;  // exactly one of generator / csv
  std::optional<CsvSource> csv;
  std::vector<int> test_domains;  // empty: every present domain
};

struct ModelConfig {
  std::vector<int> hidden{8};
  Activation activation = Activation::tanh;
  int split_index = 1;
};

struct ClusteringConfig {
  int k = 3;
  ClusteringSpace space = ClusteringSpace::raw_input;
  bool per_class = true;
  int max_iter = 100;
};

struct AnalysisConfig {
  std::size_t trials = 10000;
  std::vector<std::size_t> m_sweep{4, 8, 16, 32};
  std::size_t iterations = 1000;  // compare-samplers draws
  std::size_t batch_size = 256;   // compare-samplers M
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  ClusteringConfig clustering;
  Method method = Method::cicf;
  TrainConfig training;  // seed is taken from `seeds`
  AnalysisConfig analysis;
  std::optional<std::string> params;  // model file for `eval`
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds{0};
};

/// Every key with its default value.
nlohmann::json default_config_json();

/// Applies `key.path=value`; the value is parsed as JSON, falling back to a
/// plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Merges `doc` over the defaults and validates it. ConfigError messages
/// name the offending dotted key.
ExperimentConfig parse_config(const nlohmann::json& doc);

/// Fully resolved document: presets are expanded into explicit generator
/// parameters, so the result reproduces the run on its own.
nlohmann::json to_json(const ExperimentConfig& config);

/// Reads a JSON file; IoError when missing or unreadable, ConfigError when
/// not valid JSON.
nlohmann::json read_json_file(const std::filesystem::path& path);

DomainDataset load_dataset(const DataConfig& data);

ModelSpec model_spec(const ModelConfig& model, int input_dim, int classes);

/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

/// Worker slots: hardware concurrency, capped by CICF_LAB_THREADS.
unsigned worker_slots();

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace cicf::lab
