#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/pipeline.hpp"
#include "robnoddi/rng.hpp"

namespace robnoddi {

namespace detail {

inline Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& z) {
  // clamped to the open interval so saturated activations cannot round to
  // exactly 0 or 1
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  constexpr double lo = std::numeric_limits<double>::min();
  return (1.0 + (-z.array()).exp()).inverse().min(hi).max(lo).matrix();
}

inline Eigen::MatrixXd relu(const Eigen::MatrixXd& z) {
  return z.array().max(0.0).matrix();
}

/// N(0, scale) entries in a fixed traversal order (row-major).
inline void fill_normal(Eigen::MatrixXd& m, double scale, Rng& rng) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = scale * rng.normal();
}

} // namespace detail

/// Mean squared error over all elements.
inline double loss_mse(const Eigen::MatrixXd& prediction, const Eigen::MatrixXd& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
    throw DimensionError("loss_mse: shape mismatch");
  const double n = static_cast<double>(prediction.size());
  return (prediction - target).squaredNorm() / n;
}

/// Fully connected net: ReLU hidden layers, logistic output so predictions
/// stay in (0,1). Biases are stored as 1-row matrices; parameter order is
/// W0, b0, W1, b1, ...
class MlpModel {
public:
  MlpModel() = default;

  static MlpModel init(int input, const std::vector<int>& hidden, int output,
                       std::uint64_t seed) {
    if (input < 1 || output < 1)
      throw DimensionError("MlpModel: input and output sizes must be positive");
    MlpModel m;
    m.sizes_.push_back(input);
    for (int h : hidden) {
      if (h < 1)
        throw DimensionError("MlpModel: hidden sizes must be positive");
      m.sizes_.push_back(h);
    }
    m.sizes_.push_back(output);
    Rng rng(mix_seed(seed, 0x6d6c70u));
    for (std::size_t l = 0; l + 1 < m.sizes_.size(); ++l) {
      Eigen::MatrixXd w(m.sizes_[l], m.sizes_[l + 1]);
      Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, m.sizes_[l + 1]);
      const bool last = (l + 2 == m.sizes_.size());
      if (last)
        w.setZero(); // output starts at logistic(0) = 0.5
      else
        detail::fill_normal(w, std::sqrt(2.0 / m.sizes_[l]), rng);
      m.weights_.push_back(std::move(w));
      m.biases_.push_back(std::move(b));
    }
    return m;
  }

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  int layer_count() const { return static_cast<int>(weights_.size()); }
  const std::vector<int>& sizes() const { return sizes_; }

  std::vector<Eigen::MatrixXd*> params() {
    std::vector<Eigen::MatrixXd*> p;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.push_back(&weights_[l]);
      p.push_back(&biases_[l]);
    }
    return p;
  }
  std::vector<const Eigen::MatrixXd*> params() const {
    std::vector<const Eigen::MatrixXd*> p;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.push_back(&weights_[l]);
      p.push_back(&biases_[l]);
    }
    return p;
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const {
    check_input(x);
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Eigen::MatrixXd z = (a * weights_[l]).rowwise() + biases_[l].row(0);
      a = (l + 1 == weights_.size()) ? detail::sigmoid(z) : detail::relu(z);
    }
    return a;
  }

  /// Analytic gradients of loss_mse; returns (loss, grads aligned with params()).
  double backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                  std::vector<Eigen::MatrixXd>& grads) const {
    check_input(x);
    if (y.cols() != output_size() || y.rows() != x.rows())
      throw DimensionError("MlpModel::backward: target shape mismatch");
    const std::size_t layers = weights_.size();
    std::vector<Eigen::MatrixXd> acts(layers + 1);
    acts[0] = x;
    for (std::size_t l = 0; l < layers; ++l) {
      Eigen::MatrixXd z = (acts[l] * weights_[l]).rowwise() + biases_[l].row(0);
      acts[l + 1] = (l + 1 == layers) ? detail::sigmoid(z) : detail::relu(z);
    }
    const Eigen::MatrixXd& yhat = acts[layers];
    const double n = static_cast<double>(yhat.size());
    const double loss = (yhat - y).squaredNorm() / n;

    grads.assign(2 * layers, Eigen::MatrixXd());
    Eigen::MatrixXd delta =
        ((2.0 / n) * (yhat - y).array() * yhat.array() * (1.0 - yhat.array())).matrix();
    for (std::size_t l = layers; l-- > 0;) {
      grads[2 * l] = acts[l].transpose() * delta;
      grads[2 * l + 1] = delta.colwise().sum();
      if (l > 0) {
        const Eigen::MatrixXd back = delta * weights_[l].transpose();
        // ReLU mask from the stored activation
        delta = ((acts[l].array() > 0.0).cast<double>() * back.array()).matrix();
      }
    }
    return loss;
  }

  const Eigen::MatrixXd& weight(std::size_t l) const { return weights_[l]; }
  Eigen::MatrixXd& weight(std::size_t l) { return weights_[l]; }
  const Eigen::MatrixXd& bias(std::size_t l) const { return biases_[l]; }
  Eigen::MatrixXd& bias(std::size_t l) { return biases_[l]; }

  static MlpModel from_tensors(std::vector<int> sizes, std::vector<Eigen::MatrixXd> tensors) {
    MlpModel m;
    m.sizes_ = std::move(sizes);
    for (std::size_t l = 0; l + 1 < m.sizes_.size(); ++l) {
      m.weights_.push_back(std::move(tensors[2 * l]));
      m.biases_.push_back(std::move(tensors[2 * l + 1]));
    }
    return m;
  }

private:
  void check_input(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_size())
      throw DimensionError("MlpModel: feature size " + std::to_string(x.cols()) +
                           " does not match model input " + std::to_string(input_size()));
  }

  std::vector<int> sizes_;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::MatrixXd> biases_;
};

/// Iterative refinement net: an input projection h0 = tanh(x Win + bin), T
/// gated update steps with weights shared across iterations,
///   g = sigmoid(x Wg + h Ug + bg),  c = tanh(x Wc + h Uc + bc),
///   h <- g * c + (1 - g) * h,
/// and a logistic fully connected head. With T = 0 this reduces to a
/// one-hidden-layer net. Parameter order: Win, bin, Wg, Ug, bg, Wc, Uc, bc,
/// Wout, bout.
class GatedIterativeModel {
public:
  GatedIterativeModel() = default;

  static GatedIterativeModel init(int input, int hidden, int output, int iterations,
                                  std::uint64_t seed) {
    if (input < 1 || hidden < 1 || output < 1)
      throw DimensionError("GatedIterativeModel: sizes must be positive");
    if (iterations < 0)
      throw DimensionError("GatedIterativeModel: iteration count must be >= 0");
    GatedIterativeModel m;
    m.input_ = input;
    m.hidden_ = hidden;
    m.output_ = output;
    m.iterations_ = iterations;
    Rng rng(mix_seed(seed, 0x67617465u));
    auto mk = [&](Eigen::Index r, Eigen::Index c, double scale) {
      Eigen::MatrixXd w(r, c);
      detail::fill_normal(w, scale, rng);
      return w;
    };
    const double sx = std::sqrt(1.0 / input);
    const double sh = std::sqrt(1.0 / hidden);
    m.w_in_ = mk(input, hidden, sx);
    m.b_in_ = Eigen::MatrixXd::Zero(1, hidden);
    m.w_gate_ = mk(input, hidden, sx);
    m.u_gate_ = mk(hidden, hidden, sh);
    m.b_gate_ = Eigen::MatrixXd::Zero(1, hidden);
    m.w_cand_ = mk(input, hidden, sx);
    m.u_cand_ = mk(hidden, hidden, sh);
    m.b_cand_ = Eigen::MatrixXd::Zero(1, hidden);
    m.w_out_ = Eigen::MatrixXd::Zero(hidden, output);
    m.b_out_ = Eigen::MatrixXd::Zero(1, output);
    return m;
  }

  int input_size() const { return input_; }
  int output_size() const { return output_; }
  int hidden_size() const { return hidden_; }
  int iterations() const { return iterations_; }

  std::vector<Eigen::MatrixXd*> params() {
    return {&w_in_, &b_in_, &w_gate_, &u_gate_, &b_gate_,
            &w_cand_, &u_cand_, &b_cand_, &w_out_, &b_out_};
  }
  std::vector<const Eigen::MatrixXd*> params() const {
    return {&w_in_, &b_in_, &w_gate_, &u_gate_, &b_gate_,
            &w_cand_, &u_cand_, &b_cand_, &w_out_, &b_out_};
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const {
    check_input(x);
    Eigen::MatrixXd h = ((x * w_in_).rowwise() + b_in_.row(0)).array().tanh();
    for (int t = 0; t < iterations_; ++t) {
      const Eigen::MatrixXd g =
          detail::sigmoid(((x * w_gate_ + h * u_gate_).rowwise() + b_gate_.row(0)));
      const Eigen::MatrixXd c =
          ((x * w_cand_ + h * u_cand_).rowwise() + b_cand_.row(0)).array().tanh();
      h = (g.array() * c.array() + (1.0 - g.array()) * h.array()).matrix();
    }
    return detail::sigmoid(((h * w_out_).rowwise() + b_out_.row(0)));
  }

  double backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                  std::vector<Eigen::MatrixXd>& grads) const {
    check_input(x);
    if (y.cols() != output_ || y.rows() != x.rows())
      throw DimensionError("GatedIterativeModel::backward: target shape mismatch");
    const int T = iterations_;
    std::vector<Eigen::MatrixXd> hs(static_cast<std::size_t>(T) + 1);
    std::vector<Eigen::MatrixXd> gs(static_cast<std::size_t>(T)), cs(static_cast<std::size_t>(T));
    hs[0] = ((x * w_in_).rowwise() + b_in_.row(0)).array().tanh();
    for (int t = 0; t < T; ++t) {
      gs[static_cast<std::size_t>(t)] = detail::sigmoid(
          ((x * w_gate_ + hs[static_cast<std::size_t>(t)] * u_gate_).rowwise() + b_gate_.row(0)));
      cs[static_cast<std::size_t>(t)] =
          ((x * w_cand_ + hs[static_cast<std::size_t>(t)] * u_cand_).rowwise() + b_cand_.row(0))
              .array()
              .tanh();
      hs[static_cast<std::size_t>(t) + 1] =
          (gs[static_cast<std::size_t>(t)].array() * cs[static_cast<std::size_t>(t)].array() +
           (1.0 - gs[static_cast<std::size_t>(t)].array()) * hs[static_cast<std::size_t>(t)].array())
              .matrix();
    }
    const Eigen::MatrixXd yhat = detail::sigmoid(((hs[static_cast<std::size_t>(T)] * w_out_).rowwise() + b_out_.row(0)));
    const double n = static_cast<double>(yhat.size());
    const double loss = (yhat - y).squaredNorm() / n;

    Eigen::MatrixXd dz_out =
        ((2.0 / n) * (yhat - y).array() * yhat.array() * (1.0 - yhat.array())).matrix();
    Eigen::MatrixXd d_w_out = hs[static_cast<std::size_t>(T)].transpose() * dz_out;
    Eigen::MatrixXd d_b_out = dz_out.colwise().sum();
    Eigen::MatrixXd dh = dz_out * w_out_.transpose();

    Eigen::MatrixXd d_w_gate = Eigen::MatrixXd::Zero(input_, hidden_);
    Eigen::MatrixXd d_u_gate = Eigen::MatrixXd::Zero(hidden_, hidden_);
    Eigen::MatrixXd d_b_gate = Eigen::MatrixXd::Zero(1, hidden_);
    Eigen::MatrixXd d_w_cand = Eigen::MatrixXd::Zero(input_, hidden_);
    Eigen::MatrixXd d_u_cand = Eigen::MatrixXd::Zero(hidden_, hidden_);
    Eigen::MatrixXd d_b_cand = Eigen::MatrixXd::Zero(1, hidden_);
    for (int t = T; t-- > 0;) {
      const auto& g = gs[static_cast<std::size_t>(t)];
      const auto& c = cs[static_cast<std::size_t>(t)];
      const auto& h_prev = hs[static_cast<std::size_t>(t)];
      const Eigen::MatrixXd dg = (dh.array() * (c.array() - h_prev.array())).matrix();
      const Eigen::MatrixXd dc = (dh.array() * g.array()).matrix();
      const Eigen::MatrixXd dzg = (dg.array() * g.array() * (1.0 - g.array())).matrix();
      const Eigen::MatrixXd dzc = (dc.array() * (1.0 - c.array().square())).matrix();
      d_w_gate += x.transpose() * dzg;
      d_u_gate += h_prev.transpose() * dzg;
      d_b_gate += dzg.colwise().sum();
      d_w_cand += x.transpose() * dzc;
      d_u_cand += h_prev.transpose() * dzc;
      d_b_cand += dzc.colwise().sum();
      dh = (dh.array() * (1.0 - g.array())).matrix() + dzg * u_gate_.transpose() +
           dzc * u_cand_.transpose();
    }
    const Eigen::MatrixXd dz0 = (dh.array() * (1.0 - hs[0].array().square())).matrix();
    grads.clear();
    grads.push_back(x.transpose() * dz0);
    grads.push_back(dz0.colwise().sum());
    grads.push_back(std::move(d_w_gate));
    grads.push_back(std::move(d_u_gate));
    grads.push_back(std::move(d_b_gate));
    grads.push_back(std::move(d_w_cand));
    grads.push_back(std::move(d_u_cand));
    grads.push_back(std::move(d_b_cand));
    grads.push_back(std::move(d_w_out));
    grads.push_back(std::move(d_b_out));
    return loss;
  }

  static GatedIterativeModel from_tensors(int input, int hidden, int output,
                                          int iterations,
                                          std::vector<Eigen::MatrixXd> t) {
    GatedIterativeModel m;
    m.input_ = input;
    m.hidden_ = hidden;
    m.output_ = output;
    m.iterations_ = iterations;
    m.w_in_ = std::move(t[0]);
    m.b_in_ = std::move(t[1]);
    m.w_gate_ = std::move(t[2]);
    m.u_gate_ = std::move(t[3]);
    m.b_gate_ = std::move(t[4]);
    m.w_cand_ = std::move(t[5]);
    m.u_cand_ = std::move(t[6]);
    m.b_cand_ = std::move(t[7]);
    m.w_out_ = std::move(t[8]);
    m.b_out_ = std::move(t[9]);
    return m;
  }

private:
  void check_input(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_)
      throw DimensionError("GatedIterativeModel: feature size " +
                           std::to_string(x.cols()) + " does not match model input " +
                           std::to_string(input_));
  }

  int input_ = 0, hidden_ = 0, output_ = 0, iterations_ = 0;
  Eigen::MatrixXd w_in_, b_in_;
  Eigen::MatrixXd w_gate_, u_gate_, b_gate_;
  Eigen::MatrixXd w_cand_, u_cand_, b_cand_;
  Eigen::MatrixXd w_out_, b_out_;
};

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

enum class LrSchedule { fixed, step_decay };

struct TrainConfig {
  double learning_rate = 5e-4;
  LrSchedule schedule = LrSchedule::step_decay; // x0.5 every 10 epochs
  int batch_size = 128;
  int epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw DomainError("TrainConfig: learning rate must be positive");
    if (batch_size < 1)
      throw DomainError("TrainConfig: batch size must be >= 1");
    if (epochs < 0)
      throw DomainError("TrainConfig: epochs must be >= 0");
  }

  double lr_at_epoch(int epoch) const {
    if (schedule == LrSchedule::fixed)
      return learning_rate;
    return learning_rate * std::pow(0.5, epoch / 10);
  }
};

struct AdamState {
  std::vector<Eigen::MatrixXd> m, v;
  long step = 0;
};

inline AdamState make_adam_state(const std::vector<Eigen::MatrixXd*>& params) {
  AdamState st;
  for (const auto* p : params) {
    st.m.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
    st.v.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
  }
  return st;
}

/// Standard bias-corrected Adam update, in place.
inline void adam_step(const std::vector<Eigen::MatrixXd*>& params,
                      const std::vector<Eigen::MatrixXd>& grads, AdamState& state,
                      const TrainConfig& cfg, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: parameter/gradient count mismatch");
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols())
      throw DimensionError("adam_step: gradient shape mismatch");
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = (cfg.beta2 * state.v[i].array() +
                  (1.0 - cfg.beta2) * grads[i].array().square())
                     .matrix();
    const auto mhat = state.m[i].array() / c1;
    const auto vhat = state.v[i].array() / c2;
    params[i]->array() -= lr * mhat / (vhat.sqrt() + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainLog {
  std::vector<double> epoch_loss;
};

inline void batch_matrices(const std::vector<PatchExample>& examples,
                           const std::vector<std::size_t>& order, std::size_t begin,
                           std::size_t end, Eigen::MatrixXd& x, Eigen::MatrixXd& y) {
  const std::size_t rows = end - begin;
  const std::size_t in = examples[order[begin]].input.size();
  const std::size_t out = examples[order[begin]].target.size();
  x.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
  y.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& ex = examples[order[begin + r]];
    if (ex.input.size() != in || ex.target.size() != out)
      throw DimensionError("batch_matrices: inconsistent example shapes");
    for (std::size_t c = 0; c < in; ++c)
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = ex.input[c];
    for (std::size_t c = 0; c < out; ++c)
      y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = ex.target[c];
  }
}

/// Mini-batch Adam over shuffled examples. The provider returns the epoch's
/// examples (rebuilt per epoch for adaptive sampling, cached for fixed
/// sampling). Deterministic given cfg.seed.
template <class Model>
TrainLog train(Model& model,
               const std::function<const std::vector<PatchExample>&(int)>& epoch_provider,
               const TrainConfig& cfg) {
  cfg.validate();
  TrainLog log;
  auto params = model.params();
  AdamState state = make_adam_state(params);
  std::vector<Eigen::MatrixXd> grads;
  Eigen::MatrixXd x, y;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto& examples = epoch_provider(epoch);
    if (examples.empty())
      throw DomainError("train: epoch provider returned no examples");
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg.seed, 0x65706f63u, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);
    const double lr = cfg.lr_at_epoch(epoch);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      batch_matrices(examples, order, begin, end, x, y);
      const double loss = model.backward(x, y, grads);
      adam_step(params, grads, state, cfg, lr);
      loss_sum += loss * static_cast<double>(end - begin);
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Volume prediction.
// ---------------------------------------------------------------------------

struct PredictSettings {
  int w = 5;
  FeatureSpec feature;
  FitSettings fit;
};

/// Tiles the volume at stride w-2, converts each raw patch to features via
/// the test-time path, runs the model, and scatters the non-overlapping
/// center blocks into a parameter volume. Voxels never covered by a center
/// block (a border ring of width 1 plus any stride remainder) stay masked out.
template <class Model>
ParameterVolume predict_volume(const Model& model, const DwiVolume& vol,
                               const PredictSettings& settings) {
  if (!vol.normalized)
    throw DomainError("predict_volume: volume must be b0-normalized first");
  const int w = settings.w;
  const int t = w - 2;
  ParameterVolume out;
  out.dims = vol.dims;
  const std::size_t nvox = voxel_count(vol.dims);
  out.vic.assign(nvox, 0.0);
  out.viso.assign(nvox, 0.0);
  out.od.assign(nvox, 0.0);
  out.mu.assign(nvox, UnitDirection{0.0, 0.0, 1.0});
  out.mask.assign(nvox, 0);

  const auto gx = detail::corner_grid(vol.dims[0], w, t);
  const auto gy = detail::corner_grid(vol.dims[1], w, t);
  const auto gz = detail::corner_grid(vol.dims[2], w, t);
  struct Corner {
    int x, y, z;
  };
  std::vector<Corner> corners;
  for (int cz : gz)
    for (int cy : gy)
      for (int cx : gx)
        if (detail::center_block_foreground(vol.mask, vol.dims, w, cx, cy, cz))
          corners.push_back({cx, cy, cz});

  parallel_for(corners.size(), [&](std::size_t i) {
    const Corner c = corners[i];
    PatchExample raw = gather_raw_patch(vol, w, c.x, c.y, c.z);
    PatchExample feat = make_test_example(raw, vol.scheme, settings.feature, settings.fit);
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(feat.input.size()));
    for (std::size_t k = 0; k < feat.input.size(); ++k)
      x(0, static_cast<Eigen::Index>(k)) = feat.input[k];
    const Eigen::MatrixXd y = model.forward(x);
    std::size_t k = 0;
    for (int z = 1; z < w - 1; ++z)
      for (int y3 = 1; y3 < w - 1; ++y3)
        for (int x3 = 1; x3 < w - 1; ++x3) {
          const std::size_t v = voxel_index(vol.dims, c.x + x3, c.y + y3, c.z + z);
          out.vic[v] = y(0, static_cast<Eigen::Index>(k++));
          out.viso[v] = y(0, static_cast<Eigen::Index>(k++));
          out.od[v] = y(0, static_cast<Eigen::Index>(k++));
          out.mask[v] = 1;
        }
  });
  return out;
}

} // namespace robnoddi
