#include <CLI11.hpp>

#include <iostream>

#include "cicf/lab/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cicf-lab: clustering-then-sampling experiments for domain generalization"};
  app.require_subcommand(1);

  cicf::lab::CommandOptions options;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", options.config, "experiment config JSON");
    sub->add_option("--set", options.overrides, "override a config key, e.g. training.alpha=0");
    sub->add_option("--out", options.out, "output directory");
    sub->add_option("--seed", options.seed, "run a single seed");
  };

  auto* cluster = app.add_subcommand("cluster", "cluster each class and report gradient coherence");
  auto* train = app.add_subcommand("train", "leave-one-domain-out training over all seeds");
  auto* analyze = app.add_subcommand("analyze-se", "analytic and Monte-Carlo standard errors over an M sweep");
  auto* compare = app.add_subcommand("compare-samplers", "batch composition differences between samplers");
  auto* eval = app.add_subcommand("eval", "evaluate a saved model on every domain");
  for (auto* sub : {cluster, train, analyze, compare, eval}) add_common(sub);
  train->add_option("--method", options.method, "erm, maml or cicf")->check(CLI::IsMember({"erm", "maml", "cicf"}));
  eval->add_option("--params", options.params, "model JSON written by train");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cicf::lab::kExitConfig;
  }
  options.command = app.get_subcommands().front()->get_name();
  return cicf::lab::run_command(options, std::cerr);
}
