#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xferepi/csv.hpp"
#include "xferepi/rng.hpp"

namespace xferepi::neural {

enum class Activation { relu, tanh };

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

struct NetConfig {
  int input = 9;
  std::vector<int> hidden = {64, 32, 32};
  Activation activation = Activation::relu;

  void validate() const {
    if (input < 1) throw std::invalid_argument("network input dimension must be >= 1");
    for (int h : hidden)
      if (h < 1) throw std::invalid_argument("hidden layer width must be >= 1");
  }
};

/// Dense layer, weights row-major [out x in]. Frozen layers keep their
/// parameters bit-identical through training.
struct Layer {
  int in = 0;
  int out = 0;
  std::vector<double> w;
  std::vector<double> b;
  bool trainable = true;
};

struct NetParams {
  NetConfig config;
  std::vector<Layer> layers;  // hidden layers then the linear output layer

  int input_dim() const { return config.input; }
  int penultimate_dim() const {
    return layers.size() > 1 ? layers[layers.size() - 2].out : config.input;
  }
};

/// Glorot uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
inline NetParams init_network(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NetParams net;
  net.config = cfg;
  std::vector<int> dims{cfg.input};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(1);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Layer layer;
    layer.in = dims[l];
    layer.out = dims[l + 1];
    layer.w.resize(static_cast<std::size_t>(layer.in) * static_cast<std::size_t>(layer.out));
    layer.b.assign(static_cast<std::size_t>(layer.out), 0.0);
    util::CounterRng rng(util::derive_stream(seed, "nn/init/layer/" + std::to_string(l)));
    double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    for (auto& v : layer.w) v = (2.0 * rng.uniform01() - 1.0) * limit;
    net.layers.push_back(std::move(layer));
  }
  return net;
}

inline double activate(double z, Activation a) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

inline double activate_grad(double z, Activation a) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  double t = std::tanh(z);
  return 1.0 - t * t;
}

namespace detail {

/// Pre-activations and activations per layer for one batch, reused across
/// batches to avoid allocation churn.
struct Workspace {
  std::vector<std::vector<double>> z;      // post-affine, pre-activation
  std::vector<std::vector<double>> a;      // activations (a[0] is the input copy)
  std::vector<std::vector<double>> delta;  // dL/dz per layer

  void resize(const NetParams& net, std::size_t batch) {
    std::vector<int> shape{net.input_dim()};
    for (const auto& layer : net.layers) shape.push_back(layer.out);
    if (batch == batch_ && shape == shape_) return;
    batch_ = batch;
    shape_ = shape;
    z.assign(net.layers.size(), {});
    delta.assign(net.layers.size(), {});
    a.assign(net.layers.size() + 1, {});
    a[0].resize(batch * static_cast<std::size_t>(net.input_dim()));
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      z[l].resize(batch * static_cast<std::size_t>(net.layers[l].out));
      delta[l].resize(batch * static_cast<std::size_t>(net.layers[l].out));
      a[l + 1].resize(batch * static_cast<std::size_t>(net.layers[l].out));
    }
  }

 private:
  std::size_t batch_ = 0;
  std::vector<int> shape_;
};

/// Forward pass for `rows` consecutive rows already copied into ws.a[0].
inline void forward_batch(const NetParams& net, std::size_t rows, Workspace& ws) {
  const std::size_t L = net.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    const Layer& layer = net.layers[l];
    const double* src = ws.a[l].data();
    double* zs = ws.z[l].data();
    double* as = ws.a[l + 1].data();
    const std::size_t in = static_cast<std::size_t>(layer.in);
    const std::size_t out = static_cast<std::size_t>(layer.out);
    const bool last = l + 1 == L;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = src + r * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double* wrow = layer.w.data() + o * in;
        double acc = layer.b[o];
        for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * x[i];
        zs[r * out + o] = acc;
        as[r * out + o] = last ? acc : activate(acc, net.config.activation);
      }
    }
  }
}

/// Backward pass for squared error averaged over the batch. Fills dw/db for
/// every layer at or above `lowest_trainable`.
inline void backward_batch(const NetParams& net, std::size_t rows,
                           std::span<const double> targets, Workspace& ws,
                           std::vector<std::vector<double>>& dw,
                           std::vector<std::vector<double>>& db, std::size_t lowest_trainable) {
  const std::size_t L = net.layers.size();
  const double inv_b = 1.0 / static_cast<double>(rows);
  {
    double* d = ws.delta[L - 1].data();
    const double* yhat = ws.a[L].data();
    for (std::size_t r = 0; r < rows; ++r) d[r] = 2.0 * (yhat[r] - targets[r]) * inv_b;
  }
  for (std::size_t l = L; l-- > 0;) {
    if (l < lowest_trainable) break;  // nothing below needs gradients
    const Layer& layer = net.layers[l];
    const std::size_t in = static_cast<std::size_t>(layer.in);
    const std::size_t out = static_cast<std::size_t>(layer.out);
    const double* d = ws.delta[l].data();
    const double* a_prev = ws.a[l].data();
    double* dwl = dw[l].data();
    double* dbl = db[l].data();
    std::fill(dw[l].begin(), dw[l].end(), 0.0);
    std::fill(db[l].begin(), db[l].end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = a_prev + r * in;
      const double* dr = d + r * out;
      for (std::size_t o = 0; o < out; ++o) {
        double g = dr[o];
        if (g == 0.0) continue;
        dbl[o] += g;
        double* dwrow = dwl + o * in;
        for (std::size_t i = 0; i < in; ++i) dwrow[i] += g * x[i];
      }
    }
    if (l > lowest_trainable && l > 0) {
      const double* zprev = ws.z[l - 1].data();
      double* dprev = ws.delta[l - 1].data();
      std::fill(ws.delta[l - 1].begin(),
                ws.delta[l - 1].begin() + static_cast<std::ptrdiff_t>(rows * in), 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dr = d + r * out;
        double* dp = dprev + r * in;
        for (std::size_t o = 0; o < out; ++o) {
          double g = dr[o];
          if (g == 0.0) continue;
          const double* wrow = layer.w.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) dp[i] += g * wrow[i];
        }
        for (std::size_t i = 0; i < in; ++i)
          dp[i] *= activate_grad(zprev[r * in + i], net.config.activation);
      }
    }
  }
}

}  // namespace detail

inline double forward(const NetParams& net, std::span<const double> x) {
  if (static_cast<int>(x.size()) != net.input_dim())
    throw std::invalid_argument("forward: input arity mismatch");
  static thread_local detail::Workspace ws;
  ws.resize(net, 1);
  std::copy(x.begin(), x.end(), ws.a[0].begin());
  detail::forward_batch(net, 1, ws);
  return ws.a[net.layers.size()][0];
}

/// Batched network outputs for `n` row-major feature rows.
inline std::vector<double> predict_rows(const NetParams& net, std::span<const double> features,
                                        std::size_t n) {
  const std::size_t p = static_cast<std::size_t>(net.input_dim());
  if (features.size() != n * p) throw std::invalid_argument("predict_rows: shape mismatch");
  std::vector<double> out(n);
  detail::Workspace ws;
  const std::size_t chunk = 512;
  ws.resize(net, std::min(chunk, std::max<std::size_t>(n, 1)));
  for (std::size_t at = 0; at < n;) {
    std::size_t take = std::min(chunk, n - at);
    std::copy_n(features.data() + at * p, take * p, ws.a[0].data());
    detail::forward_batch(net, take, ws);
    std::copy_n(ws.a[net.layers.size()].data(), take, out.begin() + static_cast<std::ptrdiff_t>(at));
    at += take;
  }
  return out;
}

/// Activations of the last hidden layer for one input row.
inline std::vector<double> hidden_representation(const NetParams& net, std::span<const double> x) {
  if (net.layers.size() < 2)
    throw std::invalid_argument("hidden_representation: network has no hidden layers");
  detail::Workspace ws;
  ws.resize(net, 1);
  std::copy(x.begin(), x.end(), ws.a[0].begin());
  detail::forward_batch(net, 1, ws);
  return ws.a[net.layers.size() - 1];
}

struct Gradients {
  std::vector<std::vector<double>> dw;
  std::vector<std::vector<double>> db;
  double loss = 0.0;
};

/// Full-batch MSE loss and gradient; frozen layers report zero gradients.
inline Gradients compute_gradients(const NetParams& net, std::span<const double> features,
                                   std::span<const double> targets) {
  const std::size_t n = targets.size();
  const std::size_t p = static_cast<std::size_t>(net.input_dim());
  if (features.size() != n * p) throw std::invalid_argument("compute_gradients: shape mismatch");
  if (n == 0) throw std::invalid_argument("compute_gradients: empty batch");
  Gradients g;
  g.dw.resize(net.layers.size());
  g.db.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    g.dw[l].assign(net.layers[l].w.size(), 0.0);
    g.db[l].assign(net.layers[l].b.size(), 0.0);
  }
  detail::Workspace ws;
  ws.resize(net, n);
  std::copy(features.begin(), features.end(), ws.a[0].begin());
  detail::forward_batch(net, n, ws);
  const double* yhat = ws.a[net.layers.size()].data();
  for (std::size_t r = 0; r < n; ++r) {
    double e = yhat[r] - targets[r];
    g.loss += e * e;
  }
  g.loss /= static_cast<double>(n);
  detail::backward_batch(net, n, targets, ws, g.dw, g.db, 0);
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    if (!net.layers[l].trainable) {
      std::fill(g.dw[l].begin(), g.dw[l].end(), 0.0);
      std::fill(g.db[l].begin(), g.db[l].end(), 0.0);
    }
  return g;
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 500;
  int batch = 256;
  int patience = 20;          // epochs without val improvement before stopping
  double val_fraction = 0.1;  // 0 disables early stopping
  double lr_decay = 0.97;     // multiplies the rate every epoch
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (patience < 0) throw std::invalid_argument("patience must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
      throw std::invalid_argument("val_fraction outside [0,1)");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0))
      throw std::invalid_argument("lr_decay outside (0,1]");
  }
};

struct EpochLog {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;  // NaN when no validation split
  double lr = 0.0;
};

struct TrainResult {
  NetParams params;
  std::vector<EpochLog> log;
  bool diverged = false;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
};

/// Mini-batch gradient descent on MSE with per-epoch exponential learning
/// rate decay. With a validation split, training stops after `patience`
/// epochs without improvement and the best-validation snapshot is returned;
/// divergence (non-finite loss) stops immediately with the best snapshot so
/// far. Fixed seed means a fixed shuffle/batch trajectory.
inline TrainResult train(const NetParams& start, std::span<const double> features,
                         std::span<const double> targets, const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t n = targets.size();
  const std::size_t p = static_cast<std::size_t>(start.input_dim());
  if (features.size() != n * p) throw std::invalid_argument("train: shape mismatch");
  if (n == 0) throw std::invalid_argument("train: empty dataset");

  TrainResult res;
  res.params = start;
  if (cfg.epochs == 0) return res;

  util::CounterRng rng(util::derive_stream(cfg.seed, "nn/train"));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  util::shuffle(idx, rng);
  std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(n));
  if (cfg.val_fraction > 0.0 && n_val == 0 && n >= 2) n_val = 1;
  std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  const bool has_val = !val_idx.empty();

  std::size_t lowest_trainable = res.params.layers.size();
  for (std::size_t l = 0; l < res.params.layers.size(); ++l)
    if (res.params.layers[l].trainable) {
      lowest_trainable = l;
      break;
    }
  if (lowest_trainable == res.params.layers.size()) return res;  // everything frozen

  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  detail::Workspace ws;
  ws.resize(res.params, std::max<std::size_t>(batch, 1));
  std::vector<std::vector<double>> dw(res.params.layers.size()), db(res.params.layers.size());
  for (std::size_t l = 0; l < res.params.layers.size(); ++l) {
    dw[l].resize(res.params.layers[l].w.size());
    db[l].resize(res.params.layers[l].b.size());
  }
  std::vector<double> batch_y(batch);

  auto mse_over = [&](const std::vector<std::size_t>& rows) {
    if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    for (std::size_t at = 0; at < rows.size();) {
      std::size_t take = std::min(batch, rows.size() - at);
      for (std::size_t r = 0; r < take; ++r)
        std::copy_n(features.data() + rows[at + r] * p, p, ws.a[0].data() + r * p);
      detail::forward_batch(res.params, take, ws);
      const double* yhat = ws.a[res.params.layers.size()].data();
      for (std::size_t r = 0; r < take; ++r) {
        double e = yhat[r] - targets[rows[at + r]];
        acc += e * e;
      }
      at += take;
    }
    return acc / static_cast<double>(rows.size());
  };

  NetParams best = res.params;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  double lr = cfg.learning_rate;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    util::shuffle(train_idx, rng);
    double sq_err = 0.0;  // pre-update minibatch losses, running epoch estimate
    for (std::size_t at = 0; at < train_idx.size();) {
      std::size_t take = std::min(batch, train_idx.size() - at);
      for (std::size_t r = 0; r < take; ++r) {
        std::copy_n(features.data() + train_idx[at + r] * p, p, ws.a[0].data() + r * p);
        batch_y[r] = targets[train_idx[at + r]];
      }
      detail::forward_batch(res.params, take, ws);
      const double* yhat = ws.a[res.params.layers.size()].data();
      for (std::size_t r = 0; r < take; ++r) {
        double e = yhat[r] - batch_y[r];
        sq_err += e * e;
      }
      detail::backward_batch(res.params, take, std::span(batch_y.data(), take), ws, dw, db,
                             lowest_trainable);
      for (std::size_t l = lowest_trainable; l < res.params.layers.size(); ++l) {
        Layer& layer = res.params.layers[l];
        if (!layer.trainable) continue;
        for (std::size_t k = 0; k < layer.w.size(); ++k) layer.w[k] -= lr * dw[l][k];
        for (std::size_t k = 0; k < layer.b.size(); ++k) layer.b[k] -= lr * db[l][k];
      }
      at += take;
    }

    double train_mse = sq_err / static_cast<double>(train_idx.size());
    double val_mse = has_val ? mse_over(val_idx) : std::numeric_limits<double>::quiet_NaN();
    res.log.push_back({epoch, train_mse, val_mse, lr});
    if (!std::isfinite(train_mse) || (has_val && !std::isfinite(val_mse))) {
      res.diverged = true;
      break;
    }
    if (has_val) {
      if (val_mse < best_val) {
        best_val = val_mse;
        best_epoch = epoch;
        best = res.params;
      } else if (epoch - best_epoch > cfg.patience) {
        break;
      }
    }
    lr *= cfg.lr_decay;
  }

  if (has_val && best_epoch >= 0) {
    res.params = best;
    res.best_epoch = best_epoch;
    res.best_val = best_val;
  } else if (res.diverged) {
    res.params = best_epoch >= 0 ? best : start;
  }
  return res;
}

inline void save_network(std::ostream& out, const NetParams& net) {
  out << "xferepi-network 1\n";
  out << "input " << net.config.input << "\n";
  out << "activation " << (net.config.activation == Activation::relu ? "relu" : "tanh") << "\n";
  out << "layers " << net.layers.size() << "\n";
  for (const auto& layer : net.layers) {
    out << "layer " << layer.in << ' ' << layer.out << ' ' << (layer.trainable ? 1 : 0) << "\n";
    for (std::size_t k = 0; k < layer.w.size(); ++k)
      out << util::format_double(layer.w[k]) << (k + 1 == layer.w.size() ? "\n" : " ");
    for (std::size_t k = 0; k < layer.b.size(); ++k)
      out << util::format_double(layer.b[k]) << (k + 1 == layer.b.size() ? "\n" : " ");
  }
  out << "end\n";
}

inline NetParams load_network(std::istream& in) {
  std::string tag;
  int version = 0;
  in >> tag >> version;
  if (tag != "xferepi-network" || version != 1)
    throw std::runtime_error("unrecognized network file header");
  NetParams net;
  std::string act;
  std::size_t n_layers = 0;
  in >> tag >> net.config.input >> tag >> act >> tag >> n_layers;
  net.config.activation = activation_from_string(act);
  net.config.hidden.clear();
  for (std::size_t l = 0; l < n_layers; ++l) {
    Layer layer;
    int trainable = 1;
    in >> tag >> layer.in >> layer.out >> trainable;
    if (tag != "layer") throw std::runtime_error("malformed network file");
    layer.trainable = trainable != 0;
    layer.w.resize(static_cast<std::size_t>(layer.in) * static_cast<std::size_t>(layer.out));
    layer.b.resize(static_cast<std::size_t>(layer.out));
    std::string v;
    for (auto& x : layer.w) {
      in >> v;
      x = util::parse_double(v, "network file");
    }
    for (auto& x : layer.b) {
      in >> v;
      x = util::parse_double(v, "network file");
    }
    if (l + 1 < n_layers) net.config.hidden.push_back(layer.out);
    net.layers.push_back(std::move(layer));
  }
  in >> tag;
  if (tag != "end" || !in) throw std::runtime_error("truncated network file");
  return net;
}

}  // namespace xferepi::neural
