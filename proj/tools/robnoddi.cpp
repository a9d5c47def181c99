// Command-line driver for the phantom / train / eval / ablate / report
// experiment pipeline. Exit codes: 0 success, 2 configuration error, 3 data
// or numeric error.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "robnoddi/experiment.hpp"
#include "robnoddi/parallel.hpp"

namespace {

robnoddi::ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty())
    return robnoddi::ExperimentConfig{};
  return robnoddi::load_config(path);
}

std::vector<std::pair<int, int>> parse_pairs(const std::string& text) {
  if (text.empty())
    return robnoddi::default_ablation_grid();
  std::vector<std::pair<int, int>> pairs;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, ',')) {
    const auto slash = token.find('/');
    if (slash == std::string::npos)
      throw robnoddi::ConfigError("--pairs expects s1/s2 entries, got '" + token + "'");
    pairs.emplace_back(std::stoi(token.substr(0, slash)),
                       std::stoi(token.substr(slash + 1)));
  }
  if (pairs.empty())
    throw robnoddi::ConfigError("--pairs is empty");
  return pairs;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"robnoddi: robust NODDI parameter estimation experiments on "
               "synthetic phantoms"};
  app.require_subcommand(1);
  app.fallthrough(); // accept global options after the subcommand

  std::string config_path;
  std::string out_dir = "out";
  int threads = 0;
  app.add_option("--config", config_path, "key=value experiment config file");
  app.add_option("--out", out_dir, "output/dataset directory")->capture_default_str();
  app.add_option("--threads", threads, "worker thread cap (0 = hardware)");

  auto* phantom = app.add_subcommand("phantom", "generate the synthetic dataset");

  auto* train = app.add_subcommand("train", "train one method variant");
  std::string method = "robnoddi";
  train->add_option("--method", method, "raw_fixed | sh_fixed | robnoddi")
      ->capture_default_str();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (SS or RS)");
  std::string checkpoint;
  std::string mode = "ss";
  int s1 = -1, s2 = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--mode", mode, "ss | rs")->capture_default_str();
  eval->add_option("--s1", s1, "RS directions for shell 1 (default: config eval.s1)");
  eval->add_option("--s2", s2, "RS directions for shell 2 (default: config eval.s2)");
  eval->add_option("--seed", seed, "RS scheme/noise seed (default: config eval.seed)")
      ->each([&seed_set](const std::string&) { seed_set = true; });

  auto* ablate = app.add_subcommand("ablate", "run the RS direction-count grid");
  std::string abl_checkpoint;
  std::string pairs_text;
  std::uint64_t abl_seed = 0;
  bool abl_seed_set = false;
  ablate->add_option("--checkpoint", abl_checkpoint, "checkpoint file")->required();
  ablate->add_option("--pairs", pairs_text,
                     "comma list of s1/s2 (default: 20/20,...,26/23 grid)");
  ablate->add_option("--seed", abl_seed, "base seed (default: config eval.seed)")
      ->each([&abl_seed_set](const std::string&) { abl_seed_set = true; });

  auto* report = app.add_subcommand("report", "write report.md and slice images");

  CLI11_PARSE(app, argc, argv);
  robnoddi::set_thread_cap(threads);

  try {
    const robnoddi::ExperimentConfig cfg = config_or_default(config_path);
    if (phantom->parsed()) {
      robnoddi::cmd_phantom(cfg, out_dir);
    } else if (train->parsed()) {
      robnoddi::cmd_train(cfg, method, out_dir);
    } else if (eval->parsed()) {
      robnoddi::cmd_eval(cfg, checkpoint, mode, s1 < 0 ? cfg.s1 : s1,
                         s2 < 0 ? cfg.s2 : s2, seed_set ? seed : cfg.eval_seed, out_dir);
    } else if (ablate->parsed()) {
      robnoddi::cmd_ablate(cfg, abl_checkpoint, parse_pairs(pairs_text),
                           abl_seed_set ? abl_seed : cfg.eval_seed, out_dir);
    } else if (report->parsed()) {
      robnoddi::cmd_report(out_dir);
    }
  } catch (const robnoddi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const robnoddi::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
