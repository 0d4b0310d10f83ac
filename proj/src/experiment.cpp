#include "cicf/lab/experiment.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "cicf/errors.hpp"

namespace cicf::lab {

using nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::erm: return "erm";
    case Method::maml: return "maml";
    case Method::cicf: return "cicf";
  }
  return "cicf";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::erm, Method::maml, Method::cicf})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (expected erm, maml or cicf)");
}

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) { throw ConfigError(key + ": " + what); }

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

/// Overlays `patch` on `base`, rejecting keys that `base` does not define.
/// Null slots in `base` accept any value wholesale.
void merge(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) bad(path.empty() ? "config" : path, "expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = join(path, it.key());
    if (!base.contains(it.key())) throw ConfigError("unknown key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it->is_object())
      merge(slot, *it, key);
    else
      slot = *it;
  }
}

double number(const json& j, const std::string& key) {
  if (!j.is_number()) bad(key, "expected a number");
  return j.get<double>();
}

std::int64_t integer(const json& j, const std::string& key) {
  if (!j.is_number_integer()) bad(key, "expected an integer");
  if (j.is_number_unsigned()) {
    const auto u = j.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(INT64_MAX)) bad(key, "integer out of range");
    return static_cast<std::int64_t>(u);
  }
  return j.get<std::int64_t>();
}

int small_int(const json& j, const std::string& key, int min) {
  const std::int64_t v = integer(j, key);
  if (v < min || v > INT32_MAX) bad(key, "must be an integer >= " + std::to_string(min));
  return static_cast<int>(v);
}

std::size_t count(const json& j, const std::string& key, std::size_t min) {
  const std::int64_t v = integer(j, key);
  if (v < static_cast<std::int64_t>(min)) bad(key, "must be >= " + std::to_string(min));
  return static_cast<std::size_t>(v);
}

std::uint64_t seed_value(const json& j, const std::string& key) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  bad(key, "expected a non-negative integer");
}

std::string text(const json& j, const std::string& key) {
  if (!j.is_string()) bad(key, "expected a string");
  return j.get<std::string>();
}

bool boolean(const json& j, const std::string& key) {
  if (!j.is_boolean()) bad(key, "expected true or false");
  return j.get<bool>();
}

const json& array(const json& j, const std::string& key) {
  if (!j.is_array()) bad(key, "expected an array");
  return j;
}

template <typename F>
auto keyed(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const ConfigError& e) {
    bad(key, e.what());
  }
}

json generator_defaults() {
  return {{"class_count", 2},     {"causal_dims", 2},     {"confounder_dims", 2},      {"domains", json::array()},
          {"causal_separation", 2.0}, {"noise_std", 1.0}, {"confounder_scale", 3.0}, {"seed", 0}};
}

json generator_json(const SyntheticDomainSpec& s) {
  json domains = json::array();
  for (const auto& d : s.domains) domains.push_back({{"rho", d.rho}, {"samples_per_class", d.samples_per_class}});
  return {{"class_count", s.class_count},
          {"causal_dims", s.causal_dims},
          {"confounder_dims", s.confounder_dims},
          {"domains", domains},
          {"causal_separation", s.causal_separation},
          {"noise_std", s.noise_std},
          {"confounder_scale", s.confounder_scale},
          {"seed", s.seed}};
}

SyntheticDomainSpec parse_generator(const json& patch, const std::string& path) {
  json g = generator_defaults();
  merge(g, patch, path);
  SyntheticDomainSpec s;
  s.class_count = small_int(g["class_count"], path + ".class_count", 2);
  s.causal_dims = small_int(g["causal_dims"], path + ".causal_dims", 1);
  s.confounder_dims = small_int(g["confounder_dims"], path + ".confounder_dims", 0);
  s.causal_separation = number(g["causal_separation"], path + ".causal_separation");
  s.noise_std = number(g["noise_std"], path + ".noise_std");
  s.confounder_scale = number(g["confounder_scale"], path + ".confounder_scale");
  s.seed = seed_value(g["seed"], path + ".seed");
  const json& domains = array(g["domains"], path + ".domains");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const std::string key = path + ".domains[" + std::to_string(i) + "]";
    json d = {{"rho", 0.0}, {"samples_per_class", 100}};
    merge(d, domains[i], key);
    s.domains.push_back({number(d["rho"], key + ".rho"), small_int(d["samples_per_class"], key + ".samples_per_class", 1)});
  }
  keyed(path, [&] {
    s.validate();
    return 0;
  });
  return s;
}

std::optional<int> optional_int(const json& j, const std::string& key, int min) {
  if (j.is_null()) return std::nullopt;
  return small_int(j, key, min);
}

CsvSource parse_csv(const json& patch) {
  json c = {{"path", nullptr}, {"label_column", "label"}, {"domain_column", "domain"},
            {"class_count", nullptr}, {"domain_count", nullptr}};
  merge(c, patch, "data.csv");
  CsvSource s;
  s.path = text(c["path"], "data.csv.path");
  s.schema.label_column = text(c["label_column"], "data.csv.label_column");
  s.schema.domain_column = text(c["domain_column"], "data.csv.domain_column");
  s.schema.class_count = optional_int(c["class_count"], "data.csv.class_count", 1);
  s.schema.domain_count = optional_int(c["domain_count"], "data.csv.domain_count", 1);
  return s;
}

std::string activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

std::string space_name(ClusteringSpace s) { return s == ClusteringSpace::raw_input ? "input" : "encoder"; }

}  // namespace

json default_config_json() {
  const TrainConfig t;
  const AnalysisConfig a;
  return {
      {"data", {{"preset", "confounded-3"}, {"generator", nullptr}, {"csv", nullptr}, {"test_domains", json::array()}}},
      {"model", {{"hidden", {8}}, {"activation", "tanh"}, {"split_index", 1}}},
      {"clustering", {{"K", 3}, {"space", "input"}, {"per_class", true}, {"max_iter", 100}}},
      {"training",
       {{"method", "cicf"},
        {"alpha", t.alpha},
        {"beta", t.beta},
        {"epochs", t.epochs},
        {"M", t.m},
        {"M_l", t.m_l},
        {"outer_mode", cicf::to_string(t.outer_mode)},
        {"allocation_scheme", cicf::to_string(t.allocation_scheme)},
        {"outer_sampler", cicf::to_string(t.outer_sampler)},
        {"update_scope", cicf::to_string(t.update_scope)},
        {"task_mode", cicf::to_string(t.task_mode)},
        {"hvp_eps", t.hvp_eps},
        {"iterations_per_epoch", t.iterations_per_epoch}}},
      {"analysis", {{"trials", a.trials}, {"M_sweep", a.m_sweep}, {"iterations", a.iterations}, {"M", a.batch_size}}},
      {"evaluation", {{"params", nullptr}}},
      {"output", {{"directory", "out"}}},
      {"seeds", {0}},
  };
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  if (!doc.is_object()) doc = json::object();
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    json& child = (*node)[key];
    if (!child.is_object()) child = json::object();
    node = &child;
    start = dot + 1;
  }
}

ExperimentConfig parse_config(const json& user) {
  json doc = default_config_json();
  json patch = user.is_null() ? json::object() : user;
  if (patch.is_object() && patch.contains("data") && patch["data"].is_object()) {
    json& d = patch["data"];
    const bool other = (d.contains("generator") && !d["generator"].is_null()) || (d.contains("csv") && !d["csv"].is_null());
    if (other && !d.contains("preset")) d["preset"] = nullptr;
  }
  merge(doc, patch, "");

  ExperimentConfig c;

  const json& data = doc["data"];
  const int sources = !data["preset"].is_null() + !data["generator"].is_null() + !data["csv"].is_null();
  if (sources != 1) bad("data", "set exactly one of preset, generator, csv");
  if (!data["preset"].is_null()) {
    const std::string name = text(data["preset"], "data.preset");
    c.data.generator = keyed("data.preset", [&] { return preset(name); });
  } else if (!data["generator"].is_null()) {
    c.data.generator = parse_generator(data["generator"], "data.generator");
  } else {
    c.data.csv = parse_csv(data["csv"]);
  }
  for (const auto& d : array(data["test_domains"], "data.test_domains"))
    c.data.test_domains.push_back(small_int(d, "data.test_domains", 0));

  const json& model = doc["model"];
  c.model.hidden.clear();
  for (const auto& h : array(model["hidden"], "model.hidden")) c.model.hidden.push_back(small_int(h, "model.hidden", 1));
  const std::string act = text(model["activation"], "model.activation");
  if (act == "tanh")
    c.model.activation = Activation::tanh;
  else if (act == "relu")
    c.model.activation = Activation::relu;
  else
    bad("model.activation", "expected tanh or relu, got '" + act + "'");
  c.model.split_index = small_int(model["split_index"], "model.split_index", 0);
  if (c.model.split_index > static_cast<int>(c.model.hidden.size()))
    bad("model.split_index", "must not exceed the number of hidden layers");

  const json& cl = doc["clustering"];
  c.clustering.k = small_int(cl["K"], "clustering.K", 1);
  const std::string space = text(cl["space"], "clustering.space");
  if (space == "input")
    c.clustering.space = ClusteringSpace::raw_input;
  else if (space == "encoder")
    c.clustering.space = ClusteringSpace::encoder_output;
  else
    bad("clustering.space", "expected input or encoder, got '" + space + "'");
  c.clustering.per_class = boolean(cl["per_class"], "clustering.per_class");
  c.clustering.max_iter = small_int(cl["max_iter"], "clustering.max_iter", 1);

  const json& tr = doc["training"];
  c.method = keyed("training.method", [&] { return parse_method(text(tr["method"], "training.method")); });
  TrainConfig& t = c.training;
  t.alpha = number(tr["alpha"], "training.alpha");
  t.beta = number(tr["beta"], "training.beta");
  t.epochs = small_int(tr["epochs"], "training.epochs", 0);
  t.m = count(tr["M"], "training.M", 1);
  t.m_l = count(tr["M_l"], "training.M_l", 1);
  t.k = c.clustering.k;
  t.outer_mode = keyed("training.outer_mode", [&] { return parse_outer_mode(text(tr["outer_mode"], "training.outer_mode")); });
  t.allocation_scheme = keyed("training.allocation_scheme", [&] {
    return parse_allocation_scheme(text(tr["allocation_scheme"], "training.allocation_scheme"));
  });
  t.outer_sampler = keyed("training.outer_sampler",
                          [&] { return parse_outer_sampler(text(tr["outer_sampler"], "training.outer_sampler")); });
  t.update_scope = keyed("training.update_scope",
                         [&] { return parse_update_scope(text(tr["update_scope"], "training.update_scope")); });
  t.task_mode = keyed("training.task_mode", [&] { return parse_task_mode(text(tr["task_mode"], "training.task_mode")); });
  t.hvp_eps = number(tr["hvp_eps"], "training.hvp_eps");
  t.iterations_per_epoch = count(tr["iterations_per_epoch"], "training.iterations_per_epoch", 0);
  t.validate();

  const json& an = doc["analysis"];
  c.analysis.trials = count(an["trials"], "analysis.trials", 100);
  c.analysis.m_sweep.clear();
  for (const auto& m : array(an["M_sweep"], "analysis.M_sweep")) c.analysis.m_sweep.push_back(count(m, "analysis.M_sweep", 1));
  if (c.analysis.m_sweep.empty()) bad("analysis.M_sweep", "must not be empty");
  c.analysis.iterations = count(an["iterations"], "analysis.iterations", 1);
  c.analysis.batch_size = count(an["M"], "analysis.M", 1);

  const json& params = doc["evaluation"]["params"];
  if (!params.is_null()) c.params = text(params, "evaluation.params");

  c.output_dir = text(doc["output"]["directory"], "output.directory");
  if (c.output_dir.empty()) bad("output.directory", "must not be empty");

  c.seeds.clear();
  for (const auto& s : array(doc["seeds"], "seeds")) c.seeds.push_back(seed_value(s, "seeds"));
  if (c.seeds.empty()) bad("seeds", "must not be empty");
  return c;
}

json to_json(const ExperimentConfig& c) {
  json doc = default_config_json();
  json& data = doc["data"];
  data["preset"] = nullptr;
  if (c.data.generator) data["generator"] = generator_json(*c.data.generator);
  if (c.data.csv) {
    const auto& s = c.data.csv->schema;
    data["csv"] = {{"path", c.data.csv->path},
                   {"label_column", s.label_column},
                   {"domain_column", s.domain_column},
                   {"class_count", s.class_count ? json(*s.class_count) : json(nullptr)},
                   {"domain_count", s.domain_count ? json(*s.domain_count) : json(nullptr)}};
  }
  data["test_domains"] = c.data.test_domains;
  doc["model"] = {{"hidden", c.model.hidden}, {"activation", activation_name(c.model.activation)},
                  {"split_index", c.model.split_index}};
  doc["clustering"] = {{"K", c.clustering.k}, {"space", space_name(c.clustering.space)},
                       {"per_class", c.clustering.per_class}, {"max_iter", c.clustering.max_iter}};
  const TrainConfig& t = c.training;
  doc["training"] = {{"method", to_string(c.method)},
                     {"alpha", t.alpha},
                     {"beta", t.beta},
                     {"epochs", t.epochs},
                     {"M", t.m},
                     {"M_l", t.m_l},
                     {"outer_mode", cicf::to_string(t.outer_mode)},
                     {"allocation_scheme", cicf::to_string(t.allocation_scheme)},
                     {"outer_sampler", cicf::to_string(t.outer_sampler)},
                     {"update_scope", cicf::to_string(t.update_scope)},
                     {"task_mode", cicf::to_string(t.task_mode)},
                     {"hvp_eps", t.hvp_eps},
                     {"iterations_per_epoch", t.iterations_per_epoch}};
  doc["analysis"] = {{"trials", c.analysis.trials}, {"M_sweep", c.analysis.m_sweep},
                     {"iterations", c.analysis.iterations}, {"M", c.analysis.batch_size}};
  doc["evaluation"]["params"] = c.params ? json(*c.params) : json(nullptr);
  doc["output"]["directory"] = c.output_dir;
  doc["seeds"] = c.seeds;
  return doc;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  json doc = json::parse(buf.str(), nullptr, false);
  if (doc.is_discarded()) throw ConfigError("'" + path.string() + "' is not valid JSON");
  return doc;
}

DomainDataset load_dataset(const DataConfig& data) {
  if (data.generator) return generate(*data.generator);
  if (data.csv) return load_csv(data.csv->path, data.csv->schema);
  throw ConfigError("data: no source configured");
}

ModelSpec model_spec(const ModelConfig& model, int input_dim, int classes) {
  ModelSpec s;
  s.layer_widths.push_back(input_dim);
  s.layer_widths.insert(s.layer_widths.end(), model.hidden.begin(), model.hidden.end());
  s.layer_widths.push_back(classes);
  s.activation = model.activation;
  s.split_index = model.split_index;
  s.validate();
  return s;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << contents;
    out.close();
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

unsigned worker_slots() {
  unsigned slots = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CICF_LAB_THREADS")) {
    unsigned cap = 0;
    const std::string s(env);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), cap);
    if (ec != std::errc() || ptr != s.data() + s.size() || cap == 0)
      throw ConfigError("CICF_LAB_THREADS must be a positive integer, got '" + s + "'");
    slots = std::min(slots, cap);
  }
  return slots;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace cicf::lab
