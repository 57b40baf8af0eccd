#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlvc/config.hpp"
#include "mlvc/dataset.hpp"
#include "mlvc/metrics.hpp"
#include "mlvc/rng.hpp"
#include "mlvc/types.hpp"

namespace mlvc {

// Score-space ensembling: equal averaging, one learned weight per model, or
// one learned weight per model per class. Weights are fit by minibatch Adam
// on MSE against 0/1 label targets, starting from Normal(1/M, 0.05) draws.
// Combination is linear and unclamped while fitting; only final combined
// outputs are clamped into [0, 1].

enum class EnsembleMode { equal, per_model, per_model_per_class };

inline const char* ensemble_mode_name(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::equal: return "equal";
    case EnsembleMode::per_model: return "per_model";
    case EnsembleMode::per_model_per_class: return "per_model_per_class";
  }
  return "?";
}

inline EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s == "equal") return EnsembleMode::equal;
  if (s == "per_model") return EnsembleMode::per_model;
  if (s == "per_model_per_class") return EnsembleMode::per_model_per_class;
  throw ConfigError("unknown ensemble mode '" + s + "'");
}

struct EnsembleWeights {
  EnsembleMode mode = EnsembleMode::equal;
  std::vector<std::string> model_names;
  Eigen::MatrixXd weights;  // per_model: M x 1; per_model_per_class: M x C; equal: empty

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = ensemble_mode_name(mode);
    j["model_names"] = model_names;
    j["rows"] = weights.rows();
    j["cols"] = weights.cols();
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(weights.size()));
    for (Eigen::Index r = 0; r < weights.rows(); ++r)
      for (Eigen::Index c = 0; c < weights.cols(); ++c) w.push_back(weights(r, c));
    j["weights"] = w;
    return j;
  }

  static EnsembleWeights from_json(const nlohmann::json& j) {
    EnsembleWeights w;
    w.mode = parse_ensemble_mode(j.at("mode").get<std::string>());
    w.model_names = j.value("model_names", std::vector<std::string>{});
    const Eigen::Index rows = j.value("rows", 0), cols = j.value("cols", 0);
    const auto flat = j.value("weights", std::vector<double>{});
    if (static_cast<Eigen::Index>(flat.size()) != rows * cols)
      throw std::runtime_error("ensemble weights: payload size mismatch");
    w.weights.resize(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) w.weights(r, c) = flat[k++];
    return w;
  }
};

inline void save_ensemble_weights(const EnsembleWeights& w, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << w.to_json().dump(2) << '\n';
}

inline EnsembleWeights load_ensemble_weights(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  try {
    return EnsembleWeights::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& ex) {
    throw std::runtime_error(path.string() + ": bad weights file: " + ex.what());
  }
}

namespace detail {

inline void check_member_alignment(const std::vector<PredictionSet>& members) {
  if (members.empty()) throw std::runtime_error("ensemble: no member predictions");
  const auto& first = members.front();
  if (first.ids.empty()) throw std::runtime_error("ensemble: empty member predictions");
  const std::size_t c = first.scores.front().size();
  for (const auto& m : members) {
    if (m.ids != first.ids)
      throw std::runtime_error("ensemble: member '" + m.model_name + "' misaligned with '" +
                               first.model_name + "'");
    for (const auto& s : m.scores)
      if (s.size() != c) throw std::runtime_error("ensemble: score width mismatch");
  }
}

inline void check_weight_shape(const std::vector<PredictionSet>& members,
                               const EnsembleWeights& w) {
  const Eigen::Index m_cnt = static_cast<Eigen::Index>(members.size());
  const Eigen::Index c = static_cast<Eigen::Index>(members.front().scores.front().size());
  switch (w.mode) {
    case EnsembleMode::equal:
      return;
    case EnsembleMode::per_model:
      if (w.weights.rows() != m_cnt || w.weights.cols() != 1)
        throw std::runtime_error("ensemble: per_model weights must be M x 1");
      return;
    case EnsembleMode::per_model_per_class:
      if (w.weights.rows() != m_cnt || w.weights.cols() != c)
        throw std::runtime_error("ensemble: per_model_per_class weights must be M x C");
      return;
  }
}

}  // namespace detail

// Linear combination without the output clamp; fitting and its tests use
// this form directly.
inline PredictionSet combine_unclamped(const std::vector<PredictionSet>& members,
                                       const EnsembleWeights& w, std::string name = "ensemble") {
  detail::check_member_alignment(members);
  detail::check_weight_shape(members, w);
  const std::size_t n = members.front().ids.size();
  const std::size_t c = members.front().scores.front().size();
  const double equal_w = 1.0 / static_cast<double>(members.size());

  PredictionSet out;
  out.model_name = std::move(name);
  out.ids = members.front().ids;
  out.scores.assign(n, ScoreVector(c, 0.0));
  for (std::size_t m = 0; m < members.size(); ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      const ScoreVector& s = members[m].scores[i];
      ScoreVector& acc = out.scores[i];
      for (std::size_t cc = 0; cc < c; ++cc) {
        double wm = equal_w;
        if (w.mode == EnsembleMode::per_model) wm = w.weights(static_cast<Eigen::Index>(m), 0);
        else if (w.mode == EnsembleMode::per_model_per_class)
          wm = w.weights(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(cc));
        acc[cc] += wm * s[cc];
      }
    }
  }
  return out;
}

inline PredictionSet combine(const std::vector<PredictionSet>& members, const EnsembleWeights& w,
                             std::string name = "ensemble") {
  PredictionSet out = combine_unclamped(members, w, std::move(name));
  for (ScoreVector& s : out.scores)
    for (double& v : s) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// mean squared error of the unclamped combination against targets
inline double ensemble_mse(const std::vector<PredictionSet>& members, const EnsembleWeights& w,
                           const std::vector<ScoreVector>& targets) {
  const PredictionSet combined = combine_unclamped(members, w, "mse");
  if (targets.size() != combined.ids.size())
    throw std::runtime_error("ensemble_mse: target count mismatch");
  double acc = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i].size() != combined.scores[i].size())
      throw std::runtime_error("ensemble_mse: target width mismatch");
    for (std::size_t c = 0; c < targets[i].size(); ++c) {
      const double d = combined.scores[i][c] - targets[i][c];
      acc += d * d;
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

struct EnsembleFitConfig {
  int max_epochs = 10;
  int batch_size = 32;
  double lr = 0.02;
  double l2 = 0.0;  // optional ridge on the weights
  Seed seed{0};

  void validate() const {
    if (max_epochs < 1) throw ConfigError("ensemble fit: max_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("ensemble fit: batch_size must be >= 1");
    if (lr <= 0) throw ConfigError("ensemble fit: lr must be positive");
    if (l2 < 0) throw ConfigError("ensemble fit: l2 must be >= 0");
  }

  static EnsembleFitConfig from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"max_epochs", "batch_size", "lr", "l2", "seed"}, "ensemble fit config");
    EnsembleFitConfig c;
    c.max_epochs = json_get(j, "max_epochs", c.max_epochs, "ensemble fit config");
    c.batch_size = json_get(j, "batch_size", c.batch_size, "ensemble fit config");
    c.lr = json_get(j, "lr", c.lr, "ensemble fit config");
    c.l2 = json_get(j, "l2", c.l2, "ensemble fit config");
    c.seed.value = json_get<std::uint64_t>(j, "seed", c.seed.value, "ensemble fit config");
    c.validate();
    return c;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["max_epochs"] = max_epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["l2"] = l2;
    j["seed"] = seed.value;
    return j;
  }
};

inline Eigen::MatrixXd draw_initial_ensemble_weights(EnsembleMode mode, int num_models,
                                                     int num_labels, Rng& rng) {
  if (mode == EnsembleMode::equal) return {};
  const Eigen::Index cols = mode == EnsembleMode::per_model ? 1 : num_labels;
  Eigen::MatrixXd w(num_models, cols);
  const double mean = 1.0 / static_cast<double>(num_models);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.gaussian(mean, 0.05);
  return w;
}

struct EnsembleFitResult {
  EnsembleWeights weights;
  std::vector<double> epoch_mse;  // index 0 = at initialization
  double best_mse = 0.0;
  int best_epoch = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = ensemble_mode_name(weights.mode);
    j["epoch_mse"] = epoch_mse;
    j["best_mse"] = best_mse;
    j["best_epoch"] = best_epoch;
    return j;
  }
};

// Core fit against arbitrary soft targets; the label-based overload below
// feeds 0/1 targets. Keeps the best full-data MSE iterate across epochs.
inline EnsembleFitResult fit_weights(const std::vector<PredictionSet>& members,
                                     const std::vector<ScoreVector>& targets, EnsembleMode mode,
                                     const EnsembleFitConfig& cfg = {}) {
  cfg.validate();
  if (mode == EnsembleMode::equal)
    throw ConfigError("ensemble fit: nothing to fit in equal mode");
  detail::check_member_alignment(members);
  const int m_cnt = static_cast<int>(members.size());
  const std::size_t n = members.front().ids.size();
  const int c_cnt = static_cast<int>(members.front().scores.front().size());
  if (targets.size() != n) throw std::runtime_error("ensemble fit: target count mismatch");

  Rng rng(cfg.seed);
  EnsembleWeights w;
  w.mode = mode;
  for (const auto& m : members) w.model_names.push_back(m.model_name);
  w.weights = draw_initial_ensemble_weights(mode, m_cnt, c_cnt, rng);

  EnsembleFitResult result;
  result.weights = w;
  result.epoch_mse.push_back(ensemble_mse(members, w, targets));
  result.best_mse = result.epoch_mse.front();
  result.best_epoch = 0;

  Eigen::MatrixXd adam_m = Eigen::MatrixXd::Zero(w.weights.rows(), w.weights.cols());
  Eigen::MatrixXd adam_v = adam_m;
  Eigen::MatrixXd grad = adam_m;
  std::int64_t t = 0;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));
      grad.setZero();
      const double scale = 2.0 / (static_cast<double>(hi - lo) * static_cast<double>(c_cnt));
      for (std::size_t bi = lo; bi < hi; ++bi) {
        const std::size_t i = order[bi];
        for (int cc = 0; cc < c_cnt; ++cc) {
          double yhat = 0.0;
          for (int m = 0; m < m_cnt; ++m) {
            const double wm =
                mode == EnsembleMode::per_model ? w.weights(m, 0) : w.weights(m, cc);
            yhat += wm * members[static_cast<std::size_t>(m)].scores[i][static_cast<std::size_t>(cc)];
          }
          const double err = yhat - targets[i][static_cast<std::size_t>(cc)];
          for (int m = 0; m < m_cnt; ++m) {
            const double p = members[static_cast<std::size_t>(m)].scores[i][static_cast<std::size_t>(cc)];
            if (mode == EnsembleMode::per_model) grad(m, 0) += scale * err * p;
            else grad(m, cc) += scale * err * p;
          }
        }
      }
      if (cfg.l2 > 0.0) grad += 2.0 * cfg.l2 * w.weights;
      ++t;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
      adam_m = beta1 * adam_m + (1.0 - beta1) * grad;
      adam_v = beta2 * adam_v + (1.0 - beta2) * grad.cwiseProduct(grad);
      w.weights.array() -= cfg.lr * (adam_m.array() / bc1) / ((adam_v.array() / bc2).sqrt() + eps);
    }
    const double mse = ensemble_mse(members, w, targets);
    result.epoch_mse.push_back(mse);
    if (mse < result.best_mse) {
      result.best_mse = mse;
      result.best_epoch = epoch;
      result.weights = w;
    }
  }
  return result;
}

inline EnsembleFitResult fit_weights(const std::vector<PredictionSet>& members,
                                     const std::vector<Example>& truth, EnsembleMode mode,
                                     const EnsembleFitConfig& cfg = {}) {
  detail::check_member_alignment(members);
  detail::check_alignment(members.front(), truth);
  const std::size_t c = members.front().scores.front().size();
  std::vector<ScoreVector> targets(truth.size(), ScoreVector(c, 0.0));
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (int l : truth[i].labels) targets[i][static_cast<std::size_t>(l)] = 1.0;
  return fit_weights(members, targets, mode, cfg);
}

}  // namespace mlvc
