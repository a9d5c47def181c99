#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "robnoddi/dataio.hpp"
#include "robnoddi/estimator.hpp"
#include "robnoddi/metrics.hpp"
#include "robnoddi/noddi.hpp"
#include "robnoddi/phantom.hpp"
#include "robnoddi/pipeline.hpp"
#include "robnoddi/shbasis.hpp"
#include "robnoddi/sphere.hpp"

namespace robnoddi {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Experiment configuration: plain-text key=value file with section prefixes.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  // phantom
  Dims3 dims{24, 24, 24};
  int n_train = 6;
  int n_val = 2;
  int n_test = 2;
  std::uint64_t phantom_seed = 20240501;
  std::uint64_t scheme_seed = 11;
  double snr = 30.0;
  std::vector<double> bvalues{1000.0, 2000.0};
  int dirs_per_shell = 90;
  int b0_count = 18;
  int quad_subdiv = 4; // 2562-point icosphere
  int mu_smooth_passes = 12;
  TissueConstants consts;
  // pipeline
  int w = 5;
  int stride = 3;
  int sh_order = 6;
  double lambda = 6e-3;
  int n_min = 30;
  int n_max = 30;
  std::vector<int> fixed_n{30, 30};
  std::uint64_t fixed_seed = 77;
  // estimator
  std::string arch = "mlp";
  std::vector<int> hidden{512, 512, 512};
  int gated_hidden = 256;
  int gated_iterations = 8;
  double lr = 5e-4;
  std::string schedule = "step";
  int batch_size = 128;
  int epochs = 30;
  std::uint64_t train_seed = 42;
  // evaluation
  int s1 = 30;
  int s2 = 30;
  std::uint64_t eval_seed = 5;

  int n_volumes() const { return n_train + n_val + n_test; }
  int target_width() const { return w - 2; }
  int output_size() const { return target_width() * target_width() * target_width() * 3; }

  void validate() const {
    for (int k = 0; k < 3; ++k)
      if (dims[k] < 8)
        throw ConfigError("config: phantom dims must be >= 8");
    if (n_train < 1 || n_val < 0 || n_test < 1)
      throw ConfigError("config: need at least 1 training and 1 test volume");
    if (!(snr > 0.0))
      throw ConfigError("config: snr must be positive");
    if (bvalues.empty())
      throw ConfigError("config: need at least one shell b-value");
    if (dirs_per_shell < 6)
      throw ConfigError("config: dirs_per_shell too small");
    if (b0_count < 1)
      throw ConfigError("config: need at least one b0 channel");
    if (mu_smooth_passes < 1 || mu_smooth_passes > 64)
      throw ConfigError("config: mu_smooth_passes out of range");
    if (w < 3 || w % 2 == 0)
      throw ConfigError("config: w must be odd and >= 3");
    if (w > dims[0] || w > dims[1] || w > dims[2])
      throw ConfigError("config: w exceeds phantom dims");
    if (stride < 1)
      throw ConfigError("config: stride must be >= 1");
    if (sh_order < 0 || sh_order > 8 || sh_order % 2 != 0)
      throw ConfigError("config: sh_order must be in {0,2,4,6,8}");
    if (!(lambda >= 0.0))
      throw ConfigError("config: lambda must be non-negative");
    if (!(20 <= n_min && n_min <= n_max && n_max <= dirs_per_shell))
      throw ConfigError("config: need 20 <= n_min <= n_max <= dirs_per_shell");
    if (fixed_n.size() != bvalues.size())
      throw ConfigError("config: fixed_n needs one entry per shell");
    for (int n : fixed_n)
      if (n < 1 || n > dirs_per_shell)
        throw ConfigError("config: fixed_n out of shell size range");
    if (arch != "mlp" && arch != "gated")
      throw ConfigError("config: arch must be 'mlp' or 'gated'");
    if (schedule != "step" && schedule != "fixed")
      throw ConfigError("config: schedule must be 'step' or 'fixed'");
    if (batch_size < 1 || epochs < 1)
      throw ConfigError("config: batch_size and epochs must be >= 1");
    if (!(lr > 0.0))
      throw ConfigError("config: learning rate must be positive");
    if (s1 < 1 || s1 > dirs_per_shell || s2 < 1 || s2 > dirs_per_shell)
      throw ConfigError("config: eval direction counts out of range");
  }
};

namespace detail {

inline std::vector<std::string> tokens(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string t;
  while (in >> t)
    out.push_back(t);
  return out;
}

inline double cfg_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size())
      throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: bad numeric value '" + v + "' for " + key);
  }
}

inline long long cfg_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size())
      throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer value '" + v + "' for " + key);
  }
}

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a])))
    ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1])))
    --b;
  return s.substr(a, b - a);
}

} // namespace detail

/// Parses a key=value config file; '#' starts a comment; unknown keys are
/// configuration errors.
inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos)
      line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " has no '='");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto toks = detail::tokens(value);
    auto ints = [&](std::size_t n) {
      if (toks.size() != n)
        throw ConfigError("config: " + key + " expects " + std::to_string(n) + " values");
    };
    if (key == "phantom.dims") {
      ints(3);
      for (int k = 0; k < 3; ++k)
        cfg.dims[static_cast<std::size_t>(k)] = static_cast<int>(detail::cfg_int(toks[static_cast<std::size_t>(k)], key));
    } else if (key == "phantom.n_train") {
      cfg.n_train = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.n_val") {
      cfg.n_val = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.n_test") {
      cfg.n_test = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.seed") {
      cfg.phantom_seed = static_cast<std::uint64_t>(detail::cfg_int(value, key));
    } else if (key == "phantom.scheme_seed") {
      cfg.scheme_seed = static_cast<std::uint64_t>(detail::cfg_int(value, key));
    } else if (key == "phantom.snr") {
      cfg.snr = detail::cfg_double(value, key);
    } else if (key == "phantom.bvalues") {
      cfg.bvalues.clear();
      for (const auto& t : toks)
        cfg.bvalues.push_back(detail::cfg_double(t, key));
    } else if (key == "phantom.dirs_per_shell") {
      cfg.dirs_per_shell = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.b0_count") {
      cfg.b0_count = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.quad_subdiv") {
      cfg.quad_subdiv = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.mu_smooth_passes") {
      cfg.mu_smooth_passes = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "phantom.d_par") {
      cfg.consts.d_par = detail::cfg_double(value, key);
    } else if (key == "phantom.d_iso") {
      cfg.consts.d_iso = detail::cfg_double(value, key);
    } else if (key == "pipeline.w") {
      cfg.w = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "pipeline.stride") {
      cfg.stride = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "pipeline.sh_order") {
      cfg.sh_order = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "pipeline.lambda") {
      cfg.lambda = detail::cfg_double(value, key);
    } else if (key == "pipeline.n_min") {
      cfg.n_min = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "pipeline.n_max") {
      cfg.n_max = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "pipeline.fixed_n") {
      cfg.fixed_n.clear();
      for (const auto& t : toks)
        cfg.fixed_n.push_back(static_cast<int>(detail::cfg_int(t, key)));
    } else if (key == "pipeline.fixed_seed") {
      cfg.fixed_seed = static_cast<std::uint64_t>(detail::cfg_int(value, key));
    } else if (key == "train.arch") {
      cfg.arch = value;
    } else if (key == "train.hidden") {
      cfg.hidden.clear();
      for (const auto& t : toks)
        cfg.hidden.push_back(static_cast<int>(detail::cfg_int(t, key)));
    } else if (key == "train.gated_hidden") {
      cfg.gated_hidden = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "train.gated_iterations") {
      cfg.gated_iterations = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "train.lr") {
      cfg.lr = detail::cfg_double(value, key);
    } else if (key == "train.schedule") {
      cfg.schedule = value;
    } else if (key == "train.batch_size") {
      cfg.batch_size = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "train.epochs") {
      cfg.epochs = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "train.seed") {
      cfg.train_seed = static_cast<std::uint64_t>(detail::cfg_int(value, key));
    } else if (key == "eval.s1") {
      cfg.s1 = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "eval.s2") {
      cfg.s2 = static_cast<int>(detail::cfg_int(value, key));
    } else if (key == "eval.seed") {
      cfg.eval_seed = static_cast<std::uint64_t>(detail::cfg_int(value, key));
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Scheme and dataset helpers.
// ---------------------------------------------------------------------------

inline GradientScheme build_scheme(const ExperimentConfig& cfg) {
  GradientScheme scheme;
  scheme.b0_count = cfg.b0_count;
  for (std::size_t s = 0; s < cfg.bvalues.size(); ++s) {
    Shell shell;
    shell.bvalue = cfg.bvalues[s];
    shell.directions =
        generate_uniform_directions(cfg.dirs_per_shell, mix_seed(cfg.scheme_seed, s));
    scheme.shells.push_back(std::move(shell));
  }
  scheme.validate();
  return scheme;
}

inline std::vector<SubsampleSelection> fixed_selections(const ExperimentConfig& cfg,
                                                        const GradientScheme& scheme) {
  std::vector<SubsampleSelection> sel;
  for (std::size_t s = 0; s < scheme.shells.size(); ++s) {
    Rng rng(mix_seed(cfg.fixed_seed, s));
    sel.push_back(random_subsample(scheme, static_cast<int>(s), cfg.fixed_n[s], rng));
  }
  return sel;
}

inline std::string volume_base(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "vol_%03d", index);
  return buf;
}

inline std::string split_of(const ExperimentConfig& cfg, int index) {
  if (index < cfg.n_train)
    return "train";
  if (index < cfg.n_train + cfg.n_val)
    return "val";
  return "test";
}

// ---------------------------------------------------------------------------
// cmd_phantom: generate the dataset on disk.
// ---------------------------------------------------------------------------

inline void cmd_phantom(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec && !fs::is_directory(out_dir))
    throw IoError("cmd_phantom: cannot create output directory '" + out_dir + "'");

  const GradientScheme scheme = build_scheme(cfg);
  std::string bvals, bvecs;
  serialize_gradient_table(scheme, bvals, bvecs);
  {
    std::ofstream f(out_dir + "/scheme.bvals");
    f << bvals;
    std::ofstream g(out_dir + "/scheme.bvecs");
    g << bvecs;
    if (!f || !g)
      throw IoError("cmd_phantom: cannot write gradient tables");
  }

  const QuadratureGrid quad = icosphere_grid(cfg.quad_subdiv);
  Manifest m;
  m.set("format", "robnoddi-dataset-v1");
  m.set("volumes", std::to_string(cfg.n_volumes()));
  m.set("scheme.bvals", "scheme.bvals");
  m.set("scheme.bvecs", "scheme.bvecs");
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", cfg.snr);
  m.set("snr", buf);
  m.set("quad_subdiv", std::to_string(cfg.quad_subdiv));
  std::snprintf(buf, sizeof(buf), "%.17g", cfg.consts.d_par);
  m.set("d_par", buf);
  std::snprintf(buf, sizeof(buf), "%.17g", cfg.consts.d_iso);
  m.set("d_iso", buf);

  for (int i = 0; i < cfg.n_volumes(); ++i) {
    const std::uint64_t pseed = mix_seed(cfg.phantom_seed, static_cast<std::uint64_t>(i), 0);
    const std::uint64_t dseed = mix_seed(cfg.phantom_seed, static_cast<std::uint64_t>(i), 1);
    const ParameterVolume pv = generate_parameter_volume(cfg.dims, pseed, cfg.mu_smooth_passes);
    const DwiVolume dwi = generate_dwi(pv, scheme, cfg.consts, cfg.snr, dseed, quad);
    const std::string base = volume_base(i);
    write_rvol(out_dir + "/" + base + ".params.rvol", to_raw(pv));
    write_rvol(out_dir + "/" + base + ".dwi.rvol", to_raw(dwi));
    const std::string prefix = "volume." + std::to_string(i);
    m.set(prefix + ".split", split_of(cfg, i));
    m.set(prefix + ".params", base + ".params.rvol");
    m.set(prefix + ".dwi", base + ".dwi.rvol");
    m.set(prefix + ".param_seed", std::to_string(pseed));
    m.set(prefix + ".dwi_seed", std::to_string(dseed));
  }
  write_manifest(out_dir + "/manifest.txt", m);
}

// ---------------------------------------------------------------------------
// Dataset loading.
// ---------------------------------------------------------------------------

struct LoadedVolume {
  ParameterVolume params;
  DwiVolume dwi; // normalized
  int index = 0;
};

struct Dataset {
  GradientScheme scheme;
  ChannelMap map;
  double snr = 30.0;
  int quad_subdiv = 4;
  TissueConstants consts;
  std::vector<LoadedVolume> train, val, test;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.txt"))
    throw IoError("load_dataset: no manifest.txt in '" + dir + "' (run phantom first)");
  const Manifest m = read_manifest((root / "manifest.txt").string());
  Dataset ds;
  const auto parsed = parse_gradient_table(read_text_file((root / m.get("scheme.bvals")).string()),
                                           read_text_file((root / m.get("scheme.bvecs")).string()));
  ds.scheme = parsed.scheme;
  ds.map = parsed.map;
  ds.snr = std::stod(m.get("snr"));
  ds.quad_subdiv = std::stoi(m.get("quad_subdiv"));
  ds.consts.d_par = std::stod(m.get("d_par"));
  ds.consts.d_iso = std::stod(m.get("d_iso"));
  const int count = std::stoi(m.get("volumes"));
  for (int i = 0; i < count; ++i) {
    const std::string prefix = "volume." + std::to_string(i);
    LoadedVolume v;
    v.index = i;
    v.params = parameter_volume_from_raw(read_rvol((root / m.get(prefix + ".params")).string()));
    DwiVolume raw = from_raw(read_rvol((root / m.get(prefix + ".dwi")).string()), ds.scheme, ds.map);
    raw.mask = v.params.mask;
    v.dwi = normalize_by_b0(raw);
    const std::string split = m.get(prefix + ".split");
    if (split == "train")
      ds.train.push_back(std::move(v));
    else if (split == "val")
      ds.val.push_back(std::move(v));
    else
      ds.test.push_back(std::move(v));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints: text header + little-endian f64 payload (row-major, tensors in
// parameter order). The header documents its own layout.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string method;
  std::string arch = "mlp";
  Representation representation = Representation::sh_coeffs;
  int w = 5;
  int sh_order = 6;
  double lambda = 6e-3;
  int feature_channels = 0;
  int input = 0;
  int output = 0;
  std::vector<int> hidden;
  int gated_hidden = 0;
  int gated_iterations = 0;
  std::vector<SubsampleSelection> fixed_selection;
  std::variant<MlpModel, GatedIterativeModel> model;

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const {
    return std::visit([&](const auto& m) { return m.forward(x); }, model);
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("save_checkpoint: cannot open '" + path + "'");
  out << "RNCKPT1\n";
  out << "method=" << ckpt.method << "\n";
  out << "arch=" << ckpt.arch << "\n";
  out << "representation="
      << (ckpt.representation == Representation::sh_coeffs ? "sh_coeffs" : "raw_dwi")
      << "\n";
  out << "w=" << ckpt.w << "\n";
  out << "sh_order=" << ckpt.sh_order << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", ckpt.lambda);
  out << "lambda=" << buf << "\n";
  out << "feature_channels=" << ckpt.feature_channels << "\n";
  out << "input=" << ckpt.input << "\n";
  out << "output=" << ckpt.output << "\n";
  if (ckpt.arch == "mlp") {
    out << "hidden=";
    for (std::size_t i = 0; i < ckpt.hidden.size(); ++i)
      out << (i ? " " : "") << ckpt.hidden[i];
    out << "\n";
  } else {
    out << "gated_hidden=" << ckpt.gated_hidden << "\n";
    out << "gated_iterations=" << ckpt.gated_iterations << "\n";
  }
  out << "shells=" << ckpt.fixed_selection.size() << "\n";
  for (std::size_t s = 0; s < ckpt.fixed_selection.size(); ++s) {
    out << "fixed_sel_" << s << "=";
    const auto& idx = ckpt.fixed_selection[s].indices;
    for (std::size_t i = 0; i < idx.size(); ++i)
      out << (i ? " " : "") << idx[i];
    out << "\n";
  }
  const auto params = std::visit([](const auto& m) { return m.params(); }, ckpt.model);
  out << "tensors=" << params.size() << "\n";
  for (std::size_t i = 0; i < params.size(); ++i)
    out << "tensor_" << i << "=" << params[i]->rows() << " " << params[i]->cols() << "\n";
  out << "payload=f64 little-endian row-major, tensors in listed order\n";
  out << "DATA\n";
  for (const auto* p : params)
    for (Eigen::Index r = 0; r < p->rows(); ++r)
      for (Eigen::Index c = 0; c < p->cols(); ++c) {
        const double v = (*p)(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
  if (!out)
    throw IoError("save_checkpoint: short write");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("load_checkpoint: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "RNCKPT1")
    throw IoError("load_checkpoint: unknown checkpoint version in '" + path + "'");
  Checkpoint ckpt;
  std::vector<std::pair<long, long>> shapes;
  std::size_t n_shells = 0;
  std::map<std::size_t, std::vector<int>> sels;
  while (std::getline(in, line) && line != "DATA") {
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      continue; // payload comment line
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    const auto toks = detail::tokens(value);
    if (key == "method")
      ckpt.method = value;
    else if (key == "arch")
      ckpt.arch = value;
    else if (key == "representation")
      ckpt.representation =
          value == "sh_coeffs" ? Representation::sh_coeffs : Representation::raw_dwi;
    else if (key == "w")
      ckpt.w = std::stoi(value);
    else if (key == "sh_order")
      ckpt.sh_order = std::stoi(value);
    else if (key == "lambda")
      ckpt.lambda = std::stod(value);
    else if (key == "feature_channels")
      ckpt.feature_channels = std::stoi(value);
    else if (key == "input")
      ckpt.input = std::stoi(value);
    else if (key == "output")
      ckpt.output = std::stoi(value);
    else if (key == "hidden") {
      ckpt.hidden.clear();
      for (const auto& t : toks)
        ckpt.hidden.push_back(std::stoi(t));
    } else if (key == "gated_hidden")
      ckpt.gated_hidden = std::stoi(value);
    else if (key == "gated_iterations")
      ckpt.gated_iterations = std::stoi(value);
    else if (key == "shells")
      n_shells = static_cast<std::size_t>(std::stoul(value));
    else if (key.rfind("fixed_sel_", 0) == 0) {
      std::vector<int> idx;
      for (const auto& t : toks)
        idx.push_back(std::stoi(t));
      sels[std::stoul(key.substr(10))] = std::move(idx);
    } else if (key == "tensors") {
      shapes.reserve(std::stoul(value));
    } else if (key.rfind("tensor_", 0) == 0) {
      if (toks.size() != 2)
        throw IoError("load_checkpoint: bad tensor shape line");
      shapes.emplace_back(std::stol(toks[0]), std::stol(toks[1]));
    }
  }
  if (line != "DATA")
    throw IoError("load_checkpoint: missing DATA marker in '" + path + "'");
  for (std::size_t s = 0; s < n_shells; ++s) {
    SubsampleSelection sel;
    sel.shell_index = static_cast<int>(s);
    auto it = sels.find(s);
    if (it == sels.end())
      throw IoError("load_checkpoint: missing fixed selection for shell " + std::to_string(s));
    sel.indices = it->second;
    ckpt.fixed_selection.push_back(std::move(sel));
  }
  std::vector<Eigen::MatrixXd> tensors;
  tensors.reserve(shapes.size());
  for (const auto& [rows, cols] : shapes) {
    Eigen::MatrixXd t(rows, cols);
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        double v = 0.0;
        if (!in.read(reinterpret_cast<char*>(&v), sizeof(double)))
          throw IoError("load_checkpoint: truncated payload in '" + path + "'");
        t(r, c) = v;
      }
    tensors.push_back(std::move(t));
  }
  if (ckpt.arch == "mlp") {
    std::vector<int> sizes;
    sizes.push_back(ckpt.input);
    for (int h : ckpt.hidden)
      sizes.push_back(h);
    sizes.push_back(ckpt.output);
    ckpt.model = MlpModel::from_tensors(std::move(sizes), std::move(tensors));
  } else {
    ckpt.model = GatedIterativeModel::from_tensors(ckpt.input, ckpt.gated_hidden,
                                                   ckpt.output, ckpt.gated_iterations,
                                                   std::move(tensors));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// cmd_train.
// ---------------------------------------------------------------------------

inline TrainConfig train_config_of(const ExperimentConfig& cfg) {
  TrainConfig tc;
  tc.learning_rate = cfg.lr;
  tc.schedule = cfg.schedule == "fixed" ? LrSchedule::fixed : LrSchedule::step_decay;
  tc.batch_size = cfg.batch_size;
  tc.epochs = cfg.epochs;
  tc.seed = cfg.train_seed;
  return tc;
}

/// Trains one method variant on the dataset in out_dir and writes
/// checkpoint_<method>.ckpt plus train_log_<method>.csv there.
/// raw_fixed: raw signals of one fixed selection; sh_fixed: SH features on the
/// same fixed selection every epoch; robnoddi: SH features with fresh per-shell
/// subsampling every epoch.
inline void cmd_train(const ExperimentConfig& cfg, const std::string& method,
                      const std::string& out_dir) {
  cfg.validate();
  if (method != "raw_fixed" && method != "sh_fixed" && method != "robnoddi")
    throw ConfigError("cmd_train: unknown method '" + method + "'");
  Dataset ds = load_dataset(out_dir);
  if (ds.train.empty())
    throw IoError("cmd_train: dataset has no training volumes");

  std::vector<PatchExample> raw_patches;
  for (const auto& v : ds.train) {
    auto p = extract_patches(v.dwi, v.params, cfg.w, cfg.stride, v.index);
    raw_patches.insert(raw_patches.end(), std::make_move_iterator(p.begin()),
                       std::make_move_iterator(p.end()));
  }
  if (raw_patches.empty())
    throw IoError("cmd_train: no usable patches (mask too small for w/stride)");

  SamplingPolicy policy;
  if (method == "robnoddi") {
    policy.mode = SamplingMode::adaptive;
    policy.n_min = cfg.n_min;
    policy.n_max = cfg.n_max;
  } else {
    policy.mode = SamplingMode::fixed;
    policy.fixed_selection = fixed_selections(cfg, ds.scheme);
  }
  const Representation repr =
      method == "raw_fixed" ? Representation::raw_dwi : Representation::sh_coeffs;
  // channel counts for raw features come from the fixed selection sizes
  SamplingPolicy fixed_pol;
  fixed_pol.mode = SamplingMode::fixed;
  fixed_pol.fixed_selection = fixed_selections(cfg, ds.scheme);
  const FeatureSpec fspec = make_feature_spec(repr, cfg.sh_order, ds.scheme, fixed_pol);
  const FitSettings fit{cfg.sh_order, cfg.lambda};

  const int input = cfg.w * cfg.w * cfg.w * fspec.channels;
  const int output = cfg.output_size();

  std::vector<PatchExample> cache;
  const bool per_epoch = method == "robnoddi";
  if (!per_epoch)
    cache = build_epoch(raw_patches, ds.scheme, policy, fspec, fit,
                        mix_seed(cfg.train_seed, 0x66697865u));
  std::function<const std::vector<PatchExample>&(int)> provider =
      [&](int epoch) -> const std::vector<PatchExample>& {
    if (per_epoch)
      cache = build_epoch(raw_patches, ds.scheme, policy, fspec, fit,
                          mix_seed(cfg.train_seed, 0x61646170u, static_cast<std::uint64_t>(epoch)));
    return cache;
  };

  const TrainConfig tc = train_config_of(cfg);
  TrainLog log;
  Checkpoint ckpt;
  ckpt.method = method;
  ckpt.arch = cfg.arch;
  ckpt.representation = repr;
  ckpt.w = cfg.w;
  ckpt.sh_order = cfg.sh_order;
  ckpt.lambda = cfg.lambda;
  ckpt.feature_channels = fspec.channels;
  ckpt.input = input;
  ckpt.output = output;
  ckpt.fixed_selection = fixed_selections(cfg, ds.scheme);
  if (cfg.arch == "mlp") {
    ckpt.hidden = cfg.hidden;
    MlpModel model = MlpModel::init(input, cfg.hidden, output, cfg.train_seed);
    log = train(model, provider, tc);
    ckpt.model = std::move(model);
  } else {
    ckpt.gated_hidden = cfg.gated_hidden;
    ckpt.gated_iterations = cfg.gated_iterations;
    GatedIterativeModel model = GatedIterativeModel::init(
        input, cfg.gated_hidden, output, cfg.gated_iterations, cfg.train_seed);
    log = train(model, provider, tc);
    ckpt.model = std::move(model);
  }
  save_checkpoint(out_dir + "/checkpoint_" + method + ".ckpt", ckpt);

  std::ofstream lf(out_dir + "/train_log_" + method + ".csv");
  lf << "epoch,loss\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", e, log.epoch_loss[e]);
    lf << buf;
  }
  if (!lf)
    throw IoError("cmd_train: cannot write training log");
}

// ---------------------------------------------------------------------------
// cmd_eval and cmd_ablate.
// ---------------------------------------------------------------------------

namespace detail {

/// Restricts a stored volume to the checkpoint's fixed per-shell selections
/// (plus all b0 channels): the SS protocol's acquisition.
inline DwiVolume restrict_to_selection(const DwiVolume& vol,
                                       const std::vector<SubsampleSelection>& sel) {
  DwiVolume out;
  out.dims = vol.dims;
  out.scheme.b0_count = vol.scheme.b0_count;
  for (std::size_t s = 0; s < vol.scheme.shells.size(); ++s) {
    Shell shell;
    shell.bvalue = vol.scheme.shells[s].bvalue;
    for (int idx : sel[s].indices)
      shell.directions.push_back(vol.scheme.shells[s].directions[static_cast<std::size_t>(idx)]);
    out.scheme.shells.push_back(std::move(shell));
  }
  out.map = canonical_channel_map(out.scheme);
  out.channels = out.map.total_channels;
  out.mask = vol.mask;
  out.normalized = vol.normalized;
  const std::size_t nvox = voxel_count(vol.dims);
  out.data.assign(nvox * static_cast<std::size_t>(out.channels), 0.0);
  for (std::size_t v = 0; v < nvox; ++v) {
    const double* src = vol.voxel(v);
    double* dst = out.voxel(v);
    for (std::size_t b = 0; b < out.map.b0_channels.size(); ++b)
      dst[out.map.b0_channels[b]] = src[vol.map.b0_channels[b]];
    for (std::size_t s = 0; s < sel.size(); ++s)
      for (std::size_t j = 0; j < sel[s].indices.size(); ++j)
        dst[out.map.shell_channels[s][j]] =
            src[vol.map.shell_channels[s][static_cast<std::size_t>(sel[s].indices[j])]];
  }
  return out;
}

/// Synthesizes a fresh acquisition of the ground-truth volume at a new
/// scheme: the RS protocol's "same subject, different directions" scan.
inline DwiVolume acquire_at_scheme(const ParameterVolume& truth,
                                   const GradientScheme& scheme,
                                   const TissueConstants& consts, double snr,
                                   int quad_subdiv, std::uint64_t noise_seed) {
  const QuadratureGrid quad = icosphere_grid(quad_subdiv);
  DwiVolume vol = generate_dwi(truth, scheme, consts, snr, noise_seed, quad);
  return normalize_by_b0(vol);
}

inline std::vector<std::uint8_t> and_masks(const std::vector<std::uint8_t>& a,
                                           const std::vector<std::uint8_t>& b) {
  std::vector<std::uint8_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = a[i] && b[i] ? 1 : 0;
  return out;
}

} // namespace detail

struct EvalResult {
  CsvRow row;
  std::vector<MetricsReport> per_volume;
  MetricsReport pooled;
  std::vector<ParameterVolume> predictions;
};

/// Evaluates a checkpoint on the test volumes. mode "ss" replays the exact
/// training selection; mode "rs" draws a fresh scheme with s1/s2 directions
/// per shell (seeded) and re-acquires the test phantoms on it.
inline EvalResult run_eval(const ExperimentConfig& cfg, const Dataset& ds,
                           const Checkpoint& ckpt, const std::string& mode, int s1,
                           int s2, std::uint64_t seed) {
  if (mode != "ss" && mode != "rs")
    throw ConfigError("eval: mode must be 'ss' or 'rs'");
  if (ds.test.empty())
    throw IoError("eval: dataset has no test volumes");
  if (ds.scheme.shells.size() != 2)
    throw ConfigError("eval: expected a 2-shell dataset");

  PredictSettings ps;
  ps.w = ckpt.w;
  ps.fit = FitSettings{ckpt.sh_order, ckpt.lambda};
  ps.feature.representation = ckpt.representation;
  ps.feature.sh_order = ckpt.sh_order;
  ps.feature.channels = ckpt.feature_channels;
  ps.feature.shells_used = {0, 1};

  GradientScheme rs_scheme;
  if (mode == "rs") {
    if (ckpt.representation == Representation::raw_dwi) {
      int trained = 0;
      for (const auto& sel : ckpt.fixed_selection)
        trained += static_cast<int>(sel.indices.size());
      if (s1 + s2 != trained)
        throw DimensionError(
            "eval: raw_dwi features are tied to the trained direction count (" +
            std::to_string(trained) + "); rs with " + std::to_string(s1) + "+" +
            std::to_string(s2) + " directions cannot feed this model");
    }
    rs_scheme.b0_count = ds.scheme.b0_count;
    const int counts[2] = {s1, s2};
    for (std::size_t s = 0; s < 2; ++s) {
      Shell shell;
      shell.bvalue = ds.scheme.shells[s].bvalue;
      shell.directions =
          generate_uniform_directions(counts[s], mix_seed(seed, 0x72736368u, s));
      rs_scheme.shells.push_back(std::move(shell));
    }
  }

  EvalResult result;
  double mse_sum = 0.0, psnr_sum = 0.0, ssim_sum = 0.0;
  double pooled_sq = 0.0;
  std::size_t pooled_vox = 0;
  double pooled_ssim = 0.0;
  for (std::size_t k = 0; k < ds.test.size(); ++k) {
    const auto& tv = ds.test[k];
    DwiVolume eval_vol;
    if (mode == "ss")
      eval_vol = detail::restrict_to_selection(tv.dwi, ckpt.fixed_selection);
    else
      eval_vol = detail::acquire_at_scheme(tv.params, rs_scheme, ds.consts, ds.snr,
                                           ds.quad_subdiv,
                                           mix_seed(seed, 0x72736e7au, static_cast<std::uint64_t>(tv.index)));
    ParameterVolume pred =
        std::visit([&](const auto& m) { return predict_volume(m, eval_vol, ps); },
                   ckpt.model);
    const auto mask = detail::and_masks(pred.mask, tv.params.mask);
    const MetricsReport r = compute_metrics(pred, tv.params, mask);
    mse_sum += r.mse_mean;
    psnr_sum += r.psnr_mean;
    ssim_sum += r.ssim_mean;
    pooled_sq += r.mse_mean * static_cast<double>(r.voxels);
    pooled_ssim += r.ssim_mean * static_cast<double>(r.voxels);
    pooled_vox += r.voxels;
    result.per_volume.push_back(r);
    pred.mask = mask;
    result.predictions.push_back(std::move(pred));
  }
  const double nv = static_cast<double>(ds.test.size());
  result.row.method = ckpt.method;
  result.row.sampling_mode = mode;
  if (mode == "ss") {
    result.row.n_dirs_shell1 = static_cast<int>(ckpt.fixed_selection[0].indices.size());
    result.row.n_dirs_shell2 = static_cast<int>(ckpt.fixed_selection[1].indices.size());
  } else {
    result.row.n_dirs_shell1 = s1;
    result.row.n_dirs_shell2 = s2;
  }
  result.row.mse = mse_sum / nv;
  result.row.psnr = psnr_sum / nv;
  result.row.ssim = ssim_sum / nv;
  result.pooled.mse_mean = pooled_sq / static_cast<double>(pooled_vox);
  result.pooled.psnr_mean = psnr(result.pooled.mse_mean);
  result.pooled.ssim_mean = pooled_ssim / static_cast<double>(pooled_vox);
  result.pooled.voxels = pooled_vox;
  (void)cfg;
  return result;
}

inline void append_csv_row(const std::string& path, const CsvRow& row) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out)
    throw IoError("cannot open '" + path + "' for append");
  if (fresh)
    out << csv_header() << "\n";
  out << format_csv_row(row) << "\n";
}

inline void cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                     const std::string& mode, int s1, int s2, std::uint64_t seed,
                     const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const Dataset ds = load_dataset(out_dir);
  const EvalResult res = run_eval(cfg, ds, ckpt, mode, s1, s2, seed);
  append_csv_row(out_dir + "/results.csv", res.row);

  // per-volume detail (plus a voxel-pooled row)
  const std::string detail_path = out_dir + "/results_detail.csv";
  const bool fresh = !fs::exists(detail_path);
  std::ofstream det(detail_path, std::ios::app);
  if (fresh)
    det << "method,sampling_mode,n_dirs_shell1,n_dirs_shell2,volume,voxels,mse,psnr,ssim\n";
  char buf[256];
  for (std::size_t k = 0; k < res.per_volume.size(); ++k) {
    const auto& r = res.per_volume[k];
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%zu,%zu,%.8f,%.5f,%.6f\n",
                  res.row.method.c_str(), mode.c_str(), res.row.n_dirs_shell1,
                  res.row.n_dirs_shell2, k, r.voxels, r.mse_mean, r.psnr_mean,
                  r.ssim_mean);
    det << buf;
  }
  std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,pooled,%zu,%.8f,%.5f,%.6f\n",
                res.row.method.c_str(), mode.c_str(), res.row.n_dirs_shell1,
                res.row.n_dirs_shell2, res.pooled.voxels, res.pooled.mse_mean,
                res.pooled.psnr_mean, res.pooled.ssim_mean);
  det << buf;

  // predictions for the report images
  fs::create_directories(out_dir + "/pred");
  for (std::size_t k = 0; k < res.predictions.size(); ++k) {
    char name[128];
    std::snprintf(name, sizeof(name), "%s/pred/%s_%s_vol%zu.params.rvol",
                  out_dir.c_str(), res.row.method.c_str(), mode.c_str(), k);
    write_rvol(name, to_raw(res.predictions[k]));
  }
}

/// Runs the RS ablation grid; writes ablation.csv with the shared CSV schema
/// plus a trend_ok column over the equal-count rows.
inline void cmd_ablate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                       const std::vector<std::pair<int, int>>& pairs,
                       std::uint64_t seed, const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const Dataset ds = load_dataset(out_dir);
  std::vector<CsvRow> rows;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const EvalResult res = run_eval(cfg, ds, ckpt, "rs", pairs[i].first,
                                    pairs[i].second, mix_seed(seed, i));
    rows.push_back(res.row);
  }
  std::ofstream out(out_dir + "/ablation.csv");
  if (!out)
    throw IoError("cmd_ablate: cannot write ablation.csv");
  out << csv_header() << ",trend_ok\n";
  double prev_equal = -1.0;
  for (const auto& row : rows) {
    std::string trend;
    if (row.n_dirs_shell1 == row.n_dirs_shell2) {
      trend = (prev_equal < 0.0 || row.mse <= 1.05 * prev_equal) ? "1" : "0";
      prev_equal = row.mse;
    }
    out << format_csv_row(row) << "," << trend << "\n";
  }
}

inline std::vector<std::pair<int, int>> default_ablation_grid() {
  return {{20, 20}, {25, 25}, {30, 30}, {35, 35}, {40, 40}, {16, 29}, {21, 28}, {26, 23}};
}

// ---------------------------------------------------------------------------
// cmd_report: markdown tables plus PGM slice images.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("write_pgm: cannot open '" + path + "'");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

namespace detail {

inline std::uint8_t to_byte(double v) {
  const double s = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(s + 0.5);
}

/// Mid-axial slice of a field as an 8-bit image (values expected in [0,1]).
inline void slice_pgm(const std::string& path, const std::vector<double>& field,
                      const Dims3& dims, double scale = 1.0) {
  const int z = dims[2] / 2;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]));
  for (int y = 0; y < dims[1]; ++y)
    for (int x = 0; x < dims[0]; ++x)
      px[static_cast<std::size_t>(y) * static_cast<std::size_t>(dims[0]) + static_cast<std::size_t>(x)] =
          to_byte(scale * field[voxel_index(dims, x, y, z)]);
  write_pgm(path, dims[0], dims[1], px);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::string& path) {
  CsvTable t;
  std::ifstream in(path);
  if (!in)
    return t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ','))
      cells.push_back(cell);
    if (first) {
      t.header = cells;
      first = false;
    } else {
      t.rows.push_back(cells);
    }
  }
  return t;
}

inline void markdown_table(std::ofstream& out, const CsvTable& t) {
  out << "|";
  for (const auto& h : t.header)
    out << " " << h << " |";
  out << "\n|";
  for (std::size_t i = 0; i < t.header.size(); ++i)
    out << "---|";
  out << "\n";
  for (const auto& row : t.rows) {
    out << "|";
    for (const auto& c : row)
      out << " " << c << " |";
    out << "\n";
  }
}

} // namespace detail

/// Builds report.md (method x sampling table, ablation table) plus mid-slice
/// PGM images of truth / prediction / absolute error per parameter. Missing
/// pieces produce a warning; an entirely empty output directory is an error.
inline void cmd_report(const std::string& out_dir) {
  const detail::CsvTable results = detail::read_csv(out_dir + "/results.csv");
  const detail::CsvTable ablation = detail::read_csv(out_dir + "/ablation.csv");
  if (results.rows.empty() && ablation.rows.empty())
    throw IoError("cmd_report: no results.csv or ablation.csv rows in '" + out_dir + "'");

  fs::create_directories(out_dir + "/report_img");
  std::ofstream md(out_dir + "/report.md");
  if (!md)
    throw IoError("cmd_report: cannot write report.md");
  md << "# Experiment report\n\n";
  if (!results.rows.empty()) {
    md << "## Test metrics by method and sampling mode\n\n";
    detail::markdown_table(md, results);
    md << "\n";
  } else {
    std::cerr << "cmd_report: warning: no results.csv rows\n";
  }
  if (!ablation.rows.empty()) {
    md << "## RS ablation over direction counts\n\n";
    detail::markdown_table(md, ablation);
    md << "\n";
  } else {
    std::cerr << "cmd_report: warning: no ablation.csv rows\n";
  }

  // slice images for every prediction the evals saved
  bool truth_written = false;
  ParameterVolume truth;
  if (fs::exists(out_dir + "/manifest.txt")) {
    const Manifest m = read_manifest(out_dir + "/manifest.txt");
    const int count = std::stoi(m.get("volumes"));
    for (int i = 0; i < count; ++i) {
      const std::string prefix = "volume." + std::to_string(i);
      if (m.get(prefix + ".split") == "test") {
        truth = parameter_volume_from_raw(
            read_rvol(out_dir + "/" + m.get(prefix + ".params")));
        truth_written = true;
        break;
      }
    }
  }
  if (truth_written) {
    detail::slice_pgm(out_dir + "/report_img/truth_vic.pgm", truth.vic, truth.dims);
    detail::slice_pgm(out_dir + "/report_img/truth_viso.pgm", truth.viso, truth.dims);
    detail::slice_pgm(out_dir + "/report_img/truth_od.pgm", truth.od, truth.dims);
    md << "## Parameter map slices\n\nGround truth: report_img/truth_{vic,viso,od}.pgm\n\n";
  }
  if (fs::is_directory(out_dir + "/pred")) {
    std::vector<std::string> preds;
    for (const auto& e : fs::directory_iterator(out_dir + "/pred"))
      if (e.path().string().find("_vol0.params.rvol") != std::string::npos)
        preds.push_back(e.path().string());
    std::sort(preds.begin(), preds.end());
    for (const auto& p : preds) {
      const ParameterVolume pred = parameter_volume_from_raw(read_rvol(p));
      std::string stem = fs::path(p).filename().string();
      stem = stem.substr(0, stem.find("_vol0"));
      detail::slice_pgm(out_dir + "/report_img/" + stem + "_vic.pgm", pred.vic, pred.dims);
      detail::slice_pgm(out_dir + "/report_img/" + stem + "_viso.pgm", pred.viso, pred.dims);
      detail::slice_pgm(out_dir + "/report_img/" + stem + "_od.pgm", pred.od, pred.dims);
      if (truth_written && pred.dims == truth.dims) {
        const std::size_t n = voxel_count(pred.dims);
        std::vector<double> err(n);
        auto write_err = [&](const std::vector<double>& a, const std::vector<double>& b,
                             const std::string& name) {
          for (std::size_t v = 0; v < n; ++v)
            err[v] = std::abs(a[v] - b[v]);
          // x4 gain so small errors stay visible
          detail::slice_pgm(out_dir + "/report_img/" + stem + "_err_" + name + ".pgm",
                            err, pred.dims, 4.0);
        };
        write_err(pred.vic, truth.vic, "vic");
        write_err(pred.viso, truth.viso, "viso");
        write_err(pred.od, truth.od, "od");
      }
      md << "Prediction slices: report_img/" << stem << "_{vic,viso,od}.pgm, error maps "
         << "report_img/" << stem << "_err_{vic,viso,od}.pgm\n\n";
    }
  }
}

} // namespace robnoddi
