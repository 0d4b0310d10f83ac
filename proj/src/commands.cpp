#include "cicf/lab/commands.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "cicf/errors.hpp"
#include "cicf/intervention.hpp"
#include "cicf/sampling.hpp"

namespace cicf::lab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void write_resolved(const ExperimentConfig& config) {
  write_file_atomic(fs::path(config.output_dir) / "resolved-config.json", dump(to_json(config)));
}

ClusterOptions cluster_options(const ExperimentConfig& config, std::uint64_t seed) {
  ClusterOptions o;
  o.k = config.clustering.k;
  o.space = config.clustering.space;
  o.per_class = config.clustering.per_class;
  o.max_iter = config.clustering.max_iter;
  o.seed = derive_seed(seed, 3);
  return o;
}

ClusterAssignment cluster(const ExperimentConfig& config, const DomainDataset& data, const ModelSpec& spec,
                          const Eigen::VectorXd& theta, std::uint64_t seed) {
  const EncoderView encoder{spec, theta};
  return cluster_per_class(data, cluster_options(config, seed),
                           config.clustering.space == ClusteringSpace::encoder_output ? &encoder : nullptr);
}

void warn_clamped(const ClusterAssignment& a, const DomainDataset& data, int k, std::ostream& log) {
  const auto sizes = data.class_sizes();
  for (int c : a.clamped_classes)
    log << "warning: class " << c << " has " << sizes[static_cast<std::size_t>(c)] << " samples; K clamped from "
        << k << " to " << sizes[static_cast<std::size_t>(c)] << "\n";
}

ModelSpec spec_for(const ExperimentConfig& config, const DomainDataset& data) {
  return model_spec(config.model, static_cast<int>(data.feature_dim()), data.class_count);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

json model_json(const ExperimentConfig& config, const ModelSpec& spec, const ParamVector& p,
                const std::optional<NormalizationStats>& norm, int test_domain, std::uint64_t seed) {
  json j;
  j["method"] = to_string(config.method);
  j["test_domain"] = test_domain;
  j["seed"] = seed;
  j["layer_widths"] = spec.layer_widths;
  j["activation"] = spec.activation == Activation::tanh ? "tanh" : "relu";
  j["split_index"] = spec.split_index;
  if (norm) {
    j["normalization"] = {{"mean", std::vector<double>(norm->mean.data(), norm->mean.data() + norm->mean.size())},
                          {"stddev", std::vector<double>(norm->stddev.data(), norm->stddev.data() + norm->stddev.size())}};
  } else {
    j["normalization"] = nullptr;
  }
  j["values"] = std::vector<double>(p.values.data(), p.values.data() + p.values.size());
  return j;
}

struct RunOutcome {
  int domain = 0;
  std::uint64_t seed = 0;
  std::optional<TrainResult> result;
  std::optional<RunMetrics> partial;
  std::string failure;
  std::optional<NormalizationStats> normalization;
  ModelSpec spec;
};

RunOutcome train_one(const ExperimentConfig& config, const DomainDataset& data, int domain, std::uint64_t seed) {
  RunOutcome out;
  out.domain = domain;
  out.seed = seed;
  auto [train, test] = leave_one_domain_out(data, domain);
  out.normalization = train.normalization;
  out.spec = spec_for(config, data);
  const ParamVector init = init_params(out.spec, seed);
  TrainConfig tc = config.training;
  tc.seed = seed;
  const std::vector<EvalSet> evals{{domain, &test}};
  try {
    switch (config.method) {
      case Method::erm:
        out.result = train_erm(tc, out.spec, train, init, evals);
        break;
      case Method::cicf: {
        const ClusterAssignment a = cluster(config, train, out.spec, init.values, seed);
        out.result = train_cicf(tc, out.spec, train, a, init, evals);
        break;
      }
      case Method::maml: {
        const auto tasks =
            tc.task_mode == TaskMode::domain
                ? make_domain_tasks(train)
                : make_random_tasks(train, std::max<int>(2, static_cast<int>(train.present_domains().size())),
                                    derive_seed(seed, 5));
        out.result = train_maml(tc, out.spec, train, tasks, init, evals);
        break;
      }
    }
  } catch (const TrainingDiverged& e) {
    out.partial = e.partial();
    out.failure = e.what();
  }
  return out;
}

void append_metrics(std::ostringstream& csv, const RunOutcome& r) {
  const RunMetrics& m = r.result ? r.result->metrics : *r.partial;
  for (const auto& e : m.epochs) {
    csv << r.domain << ',' << r.seed << ',' << e.epoch << ",train,-1," << format_double(e.train_loss) << ','
        << format_double(e.train_accuracy) << '\n';
    for (const auto& t : e.test)
      csv << r.domain << ',' << r.seed << ',' << e.epoch << ",test," << t.domain << ',' << format_double(t.loss) << ','
          << format_double(t.accuracy) << '\n';
  }
}

template <typename Job>
void parallel_for(std::size_t count, unsigned slots, Job&& job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = count;
      }
    }
  };
  slots = std::max(1u, std::min<unsigned>(slots, static_cast<unsigned>(count)));
  if (slots == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned s = 0; s < slots; ++s) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

ParamVector load_model(const fs::path& path, ModelSpec& spec, std::optional<NormalizationStats>& norm) {
  const json j = read_json_file(path);
  try {
    spec.layer_widths = j.at("layer_widths").get<std::vector<int>>();
    const std::string act = j.at("activation").get<std::string>();
    if (act != "tanh" && act != "relu") throw ConfigError("unknown activation '" + act + "'");
    spec.activation = act == "tanh" ? Activation::tanh : Activation::relu;
    spec.split_index = j.at("split_index").get<int>();
    spec.validate();
    const auto values = j.at("values").get<std::vector<double>>();
    ParamVector p = ParamVector::zeros(spec);
    if (static_cast<Index>(values.size()) != p.values.size())
      throw ShapeError("model file has " + std::to_string(values.size()) + " values, spec needs " +
                       std::to_string(p.values.size()));
    p.values = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Index>(values.size()));
    if (j.contains("normalization") && !j["normalization"].is_null()) {
      const auto mean = j["normalization"].at("mean").get<std::vector<double>>();
      const auto sd = j["normalization"].at("stddev").get<std::vector<double>>();
      NormalizationStats s;
      s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size()));
      s.stddev = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Index>(sd.size()));
      s.fitted_on = "train";
      norm = s;
    }
    return p;
  } catch (const json::exception& e) {
    throw ConfigError("evaluation.params: malformed model file '" + path.string() + "': " + e.what());
  }
}

}  // namespace

ExperimentConfig resolve_config(const CommandOptions& options) {
  json doc = options.config ? read_json_file(*options.config) : json::object();
  for (const auto& o : options.overrides) apply_override(doc, o);
  if (options.method) apply_override(doc, "training.method=\"" + *options.method + "\"");
  if (options.seed) doc["seeds"] = json::array({*options.seed});
  if (options.out) apply_override(doc, "output.directory=" + json(*options.out).dump());
  if (options.params) apply_override(doc, "evaluation.params=" + json(*options.params).dump());
  return parse_config(doc);
}

int cmd_cluster(const ExperimentConfig& config, std::ostream& log) {
  const DomainDataset data = load_dataset(config.data);
  const std::uint64_t seed = config.seeds.front();
  const ModelSpec spec = spec_for(config, data);
  const ParamVector theta = init_params(spec, seed);
  const ClusterAssignment a = cluster(config, data, spec, theta.values, seed);
  warn_clamped(a, data, config.clustering.k, log);
  const auto coherence = gradient_coherence(spec, theta.values, data, a, derive_seed(seed, 4));

  const fs::path dir(config.output_dir);
  fs::path tmp = dir / "assignment.csv";
  tmp += ".tmp";
  fs::create_directories(dir);
  write_assignment_csv(a, data, tmp);
  std::error_code ec;
  fs::rename(tmp, dir / "assignment.csv", ec);
  if (ec) throw IoError("cannot write '" + (dir / "assignment.csv").string() + "': " + ec.message());

  json clusters = json::array();
  double weighted = 0.0;
  for (std::size_t k = 0; k < a.cluster_count(); ++k) {
    clusters.push_back({{"cluster", k},
                        {"class", a.class_of_cluster[k]},
                        {"size", a.sizes[k]},
                        {"weight", a.weights[k]},
                        {"coherence", coherence[k]}});
    weighted += a.weights[k] * coherence[k];
  }
  const json report = {{"K", config.clustering.k},
                       {"K_dagger", a.cluster_count()},
                       {"N", data.size()},
                       {"seed", seed},
                       {"clamped_classes", a.clamped_classes},
                       {"mean_coherence", weighted},
                       {"clusters", clusters}};
  write_file_atomic(dir / "coherence.json", dump(report));
  write_resolved(config);
  log << "clustered " << data.size() << " samples into " << a.cluster_count() << " clusters\n";
  return kExitOk;
}

int cmd_train(const ExperimentConfig& config, std::ostream& log) {
  const DomainDataset data = load_dataset(config.data);
  std::vector<int> domains = config.data.test_domains.empty() ? data.present_domains() : config.data.test_domains;
  std::sort(domains.begin(), domains.end());
  domains.erase(std::unique(domains.begin(), domains.end()), domains.end());
  const auto present = data.present_domains();
  for (int d : domains)
    if (std::find(present.begin(), present.end(), d) == present.end())
      throw ConfigError("data.test_domains: domain " + std::to_string(d) + " is not present in the data");
  if (present.size() < 2) throw ConfigError("data: leave-one-domain-out needs at least two domains");

  std::vector<RunOutcome> runs(domains.size() * config.seeds.size());
  parallel_for(runs.size(), worker_slots(), [&](std::size_t i) {
    runs[i] = train_one(config, data, domains[i / config.seeds.size()], config.seeds[i % config.seeds.size()]);
  });

  const fs::path dir(config.output_dir);
  std::ostringstream csv;
  csv << "test_domain,seed,epoch,split,domain,loss,accuracy\n";
  for (const auto& r : runs) append_metrics(csv, r);
  write_file_atomic(dir / "metrics.csv", csv.str());

  json per_domain = json::array();
  json diverged = json::array();
  std::vector<double> domain_means;
  for (std::size_t di = 0; di < domains.size(); ++di) {
    std::vector<double> acc;
    std::vector<std::uint64_t> seeds;
    for (std::size_t si = 0; si < config.seeds.size(); ++si) {
      const RunOutcome& r = runs[di * config.seeds.size() + si];
      if (!r.result) {
        diverged.push_back({{"domain", r.domain}, {"seed", r.seed}, {"message", r.failure}});
        continue;
      }
      acc.push_back(r.result->metrics.final_test.front().accuracy);
      seeds.push_back(r.seed);
      write_file_atomic(dir / "models" /
                            (to_string(config.method) + "-domain" + std::to_string(r.domain) + "-seed" +
                             std::to_string(r.seed) + ".json"),
                        dump(model_json(config, r.spec, r.result->model, r.normalization, r.domain, r.seed)));
    }
    if (!acc.empty()) domain_means.push_back(mean_of(acc));
    per_domain.push_back({{"domain", domains[di]},
                          {"seeds", seeds},
                          {"accuracies", acc},
                          {"mean", mean_of(acc)},
                          {"std", std_of(acc)}});
  }
  const json summary = {{"method", to_string(config.method)},
                        {"seeds", config.seeds},
                        {"domains", per_domain},
                        {"mean_accuracy", mean_of(domain_means)},
                        {"diverged", diverged}};
  write_file_atomic(dir / "summary.json", dump(summary));
  write_resolved(config);

  for (const auto& d : per_domain)
    if (!d["accuracies"].empty())
      log << to_string(config.method) << " domain " << d["domain"].get<int>() << ": accuracy "
        << d["mean"].get<double>() << " +/- " << d["std"].get<double>() << "\n";
  if (!diverged.empty()) {
    for (const auto& d : diverged) log << "error: " << d["message"].get<std::string>() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_analyze_se(const ExperimentConfig& config, std::ostream& log) {
  const DomainDataset data = load_dataset(config.data);
  const std::uint64_t seed = config.seeds.front();
  const ModelSpec spec = spec_for(config, data);
  const ParamVector theta = init_params(spec, seed);
  const ClusterAssignment a = cluster(config, data, spec, theta.values, seed);
  warn_clamped(a, data, config.clustering.k, log);
  const Eigen::MatrixXd g = per_sample_gradients(spec, theta.values, data);
  const ClusterGradientStats stats = cluster_gradient_stats(g, a);
  const unsigned slots = worker_slots();

  json rows = json::array();
  std::ostringstream csv;
  csv << "M,se_random_exact,se_ours_exact,se_random_mc,se_ours_mc\n";
  for (std::size_t m : config.analysis.m_sweep) {
    if (m > data.size())
      throw ConfigError("analysis.M_sweep: M=" + std::to_string(m) + " exceeds the population N=" +
                        std::to_string(data.size()));
    const SeReport r = analyze_se(g, data, a, m, config.analysis.trials, derive_seed(seed, m), slots);
    rows.push_back(to_json(r));
    csv << m << ',' << format_double(r.se_random_exact) << ','
        << (r.se_ours_exact ? format_double(*r.se_ours_exact) : std::string()) << ','
        << format_double(r.se_random_mc.estimate) << ',' << format_double(r.se_ours_mc.estimate) << '\n';
  }
  const json report = {{"seed", seed},
                       {"trials", config.analysis.trials},
                       {"N", data.size()},
                       {"K_dagger", a.cluster_count()},
                       {"sigma2", stats.sigma2},
                       {"rows", rows}};
  const fs::path dir(config.output_dir);
  write_file_atomic(dir / "se_report.json", dump(report));
  write_file_atomic(dir / "se_plot.csv", csv.str());
  write_resolved(config);
  log << "SE analysis over " << rows.size() << " batch sizes, " << config.analysis.trials << " trials each\n";
  return kExitOk;
}

int cmd_compare_samplers(const ExperimentConfig& config, std::ostream& log) {
  const DomainDataset data = load_dataset(config.data);
  const std::uint64_t seed = config.seeds.front();
  const ModelSpec spec = spec_for(config, data);
  const ParamVector theta = init_params(spec, seed);
  const ClusterAssignment a = cluster(config, data, spec, theta.values, seed);
  warn_clamped(a, data, config.clustering.k, log);
  const std::size_t m = config.analysis.batch_size;
  if (m > data.size())
    throw ConfigError("analysis.M: M=" + std::to_string(m) + " exceeds the population N=" + std::to_string(data.size()));
  const Allocation alloc = proportional_allocation(a.sizes, m);

  const std::vector<SamplerKind> kinds{SamplerKind::stratified_proportional, SamplerKind::random,
                                       SamplerKind::class_weighted_random};
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {0, 2}, {1, 2}};
  std::vector<std::vector<double>> e(pairs.size());
  for (std::size_t t = 0; t < config.analysis.iterations; ++t) {
    Rng rng(derive_seed(seed, t));
    std::vector<std::vector<std::size_t>> hist;
    for (SamplerKind k : kinds)
      hist.push_back(cluster_histogram(draw_indices(data, a, k, is_stratified(k) ? &alloc : nullptr, m, rng), a));
    for (std::size_t p = 0; p < pairs.size(); ++p)
      e[p].push_back(static_cast<double>(sampler_difference(hist[pairs[p].first], hist[pairs[p].second]).e));
  }

  json out_pairs = json::array();
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const double mean = mean_of(e[p]);
    const double half = 1.96 * std_of(e[p]) / std::sqrt(static_cast<double>(e[p].size()));
    out_pairs.push_back({{"a", to_string(kinds[pairs[p].first])},
                         {"b", to_string(kinds[pairs[p].second])},
                         {"mean_e", mean},
                         {"mean_ratio", mean / static_cast<double>(m)},
                         {"ci95", {mean - half, mean + half}}});
  }
  const json report = {{"M", m},
                       {"K_dagger", a.cluster_count()},
                       {"N", data.size()},
                       {"iterations", config.analysis.iterations},
                       {"seed", seed},
                       {"pairs", out_pairs}};
  write_file_atomic(fs::path(config.output_dir) / "compare_samplers.json", dump(report));
  write_resolved(config);
  log << "compared samplers over " << config.analysis.iterations << " draws of M=" << m << " from "
      << a.cluster_count() << " clusters\n";
  return kExitOk;
}

int cmd_eval(const ExperimentConfig& config, std::ostream& log) {
  if (!config.params) throw ConfigError("evaluation.params: no model file given (use --params)");
  ModelSpec spec;
  std::optional<NormalizationStats> norm;
  const ParamVector p = load_model(*config.params, spec, norm);
  DomainDataset data = load_dataset(config.data);
  if (norm) apply_normalization(data, *norm);
  if (spec.input_dim() != data.feature_dim() || spec.class_count() != data.class_count)
    throw ConfigError("evaluation.params: model shape does not match the data");

  json domains = json::array();
  for (int d : data.present_domains()) {
    const DomainDataset part = data.subset(data.rows_of_domain(d));
    const EvalResult r = evaluate(spec, p.values, part);
    json confusion = json::array();
    for (Index i = 0; i < r.confusion.rows(); ++i) {
      json row = json::array();
      for (Index j = 0; j < r.confusion.cols(); ++j) row.push_back(r.confusion(i, j));
      confusion.push_back(row);
    }
    domains.push_back(
        {{"domain", d}, {"n", part.size()}, {"accuracy", r.accuracy}, {"loss", r.loss}, {"confusion", confusion}});
  }
  const EvalResult all = evaluate(spec, p.values, data);
  const json report = {{"params", *config.params}, {"accuracy", all.accuracy}, {"loss", all.loss}, {"domains", domains}};
  write_file_atomic(fs::path(config.output_dir) / "eval.json", dump(report));
  write_resolved(config);
  log << "accuracy " << all.accuracy << " over " << data.size() << " samples\n";
  return kExitOk;
}

int run_command(const CommandOptions& options, std::ostream& log) {
  try {
    const ExperimentConfig config = resolve_config(options);
    if (options.command == "cluster") return cmd_cluster(config, log);
    if (options.command == "train") return cmd_train(config, log);
    if (options.command == "analyze-se") return cmd_analyze_se(config, log);
    if (options.command == "compare-samplers") return cmd_compare_samplers(config, log);
    if (options.command == "eval") return cmd_eval(config, log);
    throw ConfigError("unknown command '" + options.command + "'");
  } catch (const IoError& e) {
    log << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    log << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    log << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace cicf::lab
