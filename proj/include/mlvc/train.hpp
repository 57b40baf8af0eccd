#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlvc/config.hpp"
#include "mlvc/labelrel.hpp"
#include "mlvc/metrics.hpp"
#include "mlvc/model.hpp"
#include "mlvc/rng.hpp"

namespace mlvc {

struct TrainConfig {
  double base_lr = 2e-4;
  double lr_decay_factor = 0.8;
  std::int64_t lr_decay_every_examples = 4'000'000;
  int batch_size = 32;
  std::int64_t max_steps = 1000;
  double lambda1 = 0.0;                       // Frobenius decay on weight matrices
  double lambda2 = 0.0;                       // label-relation trace term
  std::int64_t omega_update_every_steps = 500;
  std::int64_t eval_every_steps = 200;
  int patience = 3;                           // evals without val improvement
  double ridge_epsilon = kDefaultRidge;
  int gap_top_k = kDefaultTopK;
  Seed seed{0};

  void validate() const {
    if (base_lr <= 0) throw ConfigError("train: base_lr must be positive");
    if (lr_decay_factor <= 0 || lr_decay_factor > 1)
      throw ConfigError("train: lr_decay_factor must be in (0, 1]");
    if (lr_decay_every_examples <= 0) throw ConfigError("train: lr_decay_every_examples must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
    if (lambda1 < 0 || lambda2 < 0) throw ConfigError("train: lambdas must be >= 0");
    if (omega_update_every_steps < 1) throw ConfigError("train: omega_update_every_steps must be >= 1");
    if (eval_every_steps < 1) throw ConfigError("train: eval_every_steps must be >= 1");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (ridge_epsilon < 0 || ridge_epsilon >= 1) throw ConfigError("train: ridge_epsilon must be in [0, 1)");
    if (gap_top_k < 1) throw ConfigError("train: gap_top_k must be >= 1");
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"base_lr", "lr_decay_factor", "lr_decay_every_examples", "batch_size",
                         "max_steps", "lambda1", "lambda2", "omega_update_every_steps",
                         "eval_every_steps", "patience", "ridge_epsilon", "gap_top_k", "seed"},
                        "train config");
    TrainConfig c;
    c.base_lr = json_get(j, "base_lr", c.base_lr, "train config");
    c.lr_decay_factor = json_get(j, "lr_decay_factor", c.lr_decay_factor, "train config");
    c.lr_decay_every_examples =
        json_get(j, "lr_decay_every_examples", c.lr_decay_every_examples, "train config");
    c.batch_size = json_get(j, "batch_size", c.batch_size, "train config");
    c.max_steps = json_get(j, "max_steps", c.max_steps, "train config");
    c.lambda1 = json_get(j, "lambda1", c.lambda1, "train config");
    c.lambda2 = json_get(j, "lambda2", c.lambda2, "train config");
    c.omega_update_every_steps =
        json_get(j, "omega_update_every_steps", c.omega_update_every_steps, "train config");
    c.eval_every_steps = json_get(j, "eval_every_steps", c.eval_every_steps, "train config");
    c.patience = json_get(j, "patience", c.patience, "train config");
    c.ridge_epsilon = json_get(j, "ridge_epsilon", c.ridge_epsilon, "train config");
    c.gap_top_k = json_get(j, "gap_top_k", c.gap_top_k, "train config");
    c.seed.value = json_get<std::uint64_t>(j, "seed", c.seed.value, "train config");
    c.validate();
    return c;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["base_lr"] = base_lr;
    j["lr_decay_factor"] = lr_decay_factor;
    j["lr_decay_every_examples"] = lr_decay_every_examples;
    j["batch_size"] = batch_size;
    j["max_steps"] = max_steps;
    j["lambda1"] = lambda1;
    j["lambda2"] = lambda2;
    j["omega_update_every_steps"] = omega_update_every_steps;
    j["eval_every_steps"] = eval_every_steps;
    j["patience"] = patience;
    j["ridge_epsilon"] = ridge_epsilon;
    j["gap_top_k"] = gap_top_k;
    j["seed"] = seed.value;
    return j;
  }
};

// stepwise exponential decay on examples seen
inline double lr_at(std::int64_t examples_seen, const TrainConfig& cfg) {
  const std::int64_t k = examples_seen / cfg.lr_decay_every_examples;
  return cfg.base_lr * std::pow(cfg.lr_decay_factor, static_cast<double>(k));
}

inline constexpr double kScoreClamp = 1e-7;

struct BceResult {
  double value;
  std::vector<double> grad;  // d value / d scores
};

// Summed binary cross-entropy over labels; scores are clamped to
// [1e-7, 1 - 1e-7] before the logs. Targets may be soft.
inline BceResult bce_loss(const ScoreVector& scores, const std::vector<double>& targets) {
  if (scores.size() != targets.size()) throw std::invalid_argument("bce_loss: length mismatch");
  BceResult r{0.0, std::vector<double>(scores.size())};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], kScoreClamp, 1.0 - kScoreClamp);
    const double t = targets[i];
    r.value -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    r.grad[i] = (p - t) / (p * (1.0 - p));
  }
  return r;
}

// When the score is sigmoid(z), dBCE/dz collapses to p - t.
inline void bce_grad_logits(const ScoreVector& scores, const std::vector<double>& targets,
                            std::vector<double>& out) {
  out.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] - targets[i];
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  struct Slot {
    Eigen::MatrixXd m_w, v_w;
    Eigen::VectorXd m_b, v_b;
  };
  std::vector<Slot> slots;
  std::int64_t t = 0;
};

inline AdamState make_adam_state(const ModelParams& m) {
  AdamState s;
  s.slots.reserve(m.layers.size());
  for (const Layer& l : m.layers)
    s.slots.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                       Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                       Eigen::VectorXd::Zero(l.bias.size()), Eigen::VectorXd::Zero(l.bias.size())});
  return s;
}

// Bias-corrected Adam; the classic form param -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(ModelParams& params, const Gradients& grads, AdamState& state, double lr,
                      const AdamConfig& a = {}) {
  if (grads.layers.size() != params.layers.size() || state.slots.size() != params.layers.size())
    throw std::invalid_argument("adam_step: state/gradient shape mismatch");
  ++state.t;
  const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    Layer& l = params.layers[i];
    const Gradients::LayerGrad& g = grads.layers[i];
    AdamState::Slot& s = state.slots[i];
    if (!g.weights.allFinite() || !g.bias.allFinite())
      throw std::runtime_error("adam_step: non-finite gradient in layer " + std::to_string(i));
    s.m_w = a.beta1 * s.m_w + (1.0 - a.beta1) * g.weights;
    s.v_w = a.beta2 * s.v_w + (1.0 - a.beta2) * g.weights.cwiseProduct(g.weights);
    l.weights.array() -= lr * (s.m_w.array() / bc1) / ((s.v_w.array() / bc2).sqrt() + a.epsilon);
    if (l.bias.size() > 0) {
      s.m_b = a.beta1 * s.m_b + (1.0 - a.beta1) * g.bias;
      s.v_b = a.beta2 * s.v_b + (1.0 - a.beta2) * g.bias.cwiseProduct(g.bias);
      l.bias.array() -= lr * (s.m_b.array() / bc1) / ((s.v_b.array() / bc2).sqrt() + a.epsilon);
    }
  }
}

struct EvalPoint {
  std::int64_t step;
  double lr;
  double train_loss;  // mean objective since the previous eval
  double val_gap;
};

struct OmegaEvent {
  std::int64_t step;
  std::optional<double> trace_before;  // under the previous omega; empty on the first update
  double trace_after;
};

struct TrainLog {
  std::vector<EvalPoint> evals;
  std::vector<OmegaEvent> omega_events;
  std::int64_t steps_run = 0;
  std::int64_t best_step = -1;
  double best_val_gap = 0.0;
  bool diverged = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["steps_run"] = steps_run;
    j["best_step"] = best_step;
    j["best_val_gap"] = best_val_gap;
    j["diverged"] = diverged;
    j["evals"] = nlohmann::ordered_json::array();
    for (const auto& e : evals) {
      nlohmann::ordered_json ej;
      ej["step"] = e.step;
      ej["lr"] = e.lr;
      ej["train_loss"] = e.train_loss;
      ej["val_gap"] = e.val_gap;
      j["evals"].push_back(std::move(ej));
    }
    j["omega_events"] = nlohmann::ordered_json::array();
    for (const auto& e : omega_events) {
      nlohmann::ordered_json ej;
      ej["step"] = e.step;
      if (e.trace_before) ej["trace_before"] = *e.trace_before;
      else ej["trace_before"] = nullptr;
      ej["trace_after"] = e.trace_after;
      j["omega_events"].push_back(std::move(ej));
    }
    return j;
  }
};

struct TrainResult {
  ModelParams params;  // best validation-GAP checkpoint
  TrainLog log;
};

struct TrainOptions {
  // per-example training target (soft targets allowed); defaults to 0/1 labels
  std::function<std::vector<double>(std::size_t, const Example&)> target_fn;
  // validation score for early stopping; defaults to GAP on val_set
  std::function<double(const ModelParams&)> eval_fn;
  std::function<void(const std::string&)> log_fn;
};

// Minibatch Adam with per-epoch reshuffles, stepwise LR decay on examples
// seen, optional Frobenius decay (weight matrices only, never biases or
// gates) and optional label-relation regularization with periodic
// closed-form omega updates. Early stopping tracks validation GAP; the best
// checkpoint is returned. A non-finite objective stops training and returns
// the best checkpoint seen so far.
inline TrainResult train(const ModelParams& init, const std::vector<Example>& train_set,
                         const std::vector<Example>& val_set, const TrainConfig& cfg,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::runtime_error("train: empty training set");

  ModelParams model = init;
  AdamState adam = make_adam_state(model);
  Rng rng(cfg.seed);

  const auto target_fn = opts.target_fn ? opts.target_fn
                                        : [&](std::size_t, const Example& e) {
                                            std::vector<double> t(model.num_labels, 0.0);
                                            for (int l : e.labels) t[static_cast<std::size_t>(l)] = 1.0;
                                            return t;
                                          };
  const auto eval_fn = opts.eval_fn ? opts.eval_fn : [&](const ModelParams& m) {
    if (val_set.empty()) throw std::runtime_error("train: empty validation set");
    return gap(predict_set(m, val_set, "val"), val_set, GapConfig{cfg.gap_top_k});
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::size_t cursor = 0;

  TrainResult result;
  result.params = model;
  TrainLog& log = result.log;
  double best_gap = -1.0;
  int evals_since_best = 0;
  double loss_acc = 0.0;
  std::int64_t loss_n = 0;

  Eigen::VectorXd x(model.input_dim), upstream(model.num_labels);
  Gradients grads = zero_gradients(model);

  auto run_omega_update = [&](std::int64_t step) {
    const Eigen::MatrixXd w = output_label_matrix(model);
    std::optional<double> before;
    if (model.omega) before = trace_reg(w, *model.omega, cfg.ridge_epsilon).value;
    model.omega = update_omega(w).omega;
    const double after = trace_reg(w, *model.omega, cfg.ridge_epsilon).value;
    log.omega_events.push_back({step, before, after});
    if (opts.log_fn)
      opts.log_fn("omega update at step " + std::to_string(step) + ": trace term " +
                  (before ? std::to_string(*before) : std::string("-")) + " -> " +
                  std::to_string(after));
  };

  for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
    if (cfg.lambda2 > 0.0 && step % cfg.omega_update_every_steps == 0) run_omega_update(step);

    const double lr = lr_at(step * cfg.batch_size, cfg);
    for (auto& lg : grads.layers) {
      lg.weights.setZero();
      lg.bias.setZero();
    }
    grads.input.setZero();

    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const Example& e = train_set[order[cursor++]];
      for (int d = 0; d < model.input_dim; ++d) x[d] = e.features[d];
      const auto trace = detail::forward_trace(model, x);
      const ScoreVector p(trace.scores.data(), trace.scores.data() + trace.scores.size());
      const std::vector<double> targets = target_fn(order[cursor - 1], e);
      const BceResult bce = bce_loss(p, targets);
      batch_loss += bce.value;
      for (int c = 0; c < model.num_labels; ++c) upstream[c] = bce.grad[c];
      backward_into(model, x, upstream, grads);
    }
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    for (auto& lg : grads.layers) {
      lg.weights *= inv_b;
      lg.bias *= inv_b;
    }
    double objective = batch_loss * inv_b;

    if (cfg.lambda1 > 0.0) {
      for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (model.layers[i].role == LayerRole::gate) continue;
        grads.layers[i].weights += cfg.lambda1 * model.layers[i].weights;
        objective += 0.5 * cfg.lambda1 * model.layers[i].weights.squaredNorm();
      }
    }
    if (cfg.lambda2 > 0.0) {
      const Eigen::MatrixXd w = output_label_matrix(model);
      const TraceReg tr = trace_reg(w, *model.omega, cfg.ridge_epsilon);
      add_output_matrix_gradient(model, (cfg.lambda2 * tr.grad).eval(), grads);
      objective += cfg.lambda2 * tr.value;
    }

    if (!std::isfinite(objective)) {
      log.diverged = true;
      if (opts.log_fn) opts.log_fn("divergence at step " + std::to_string(step) + "; stopping");
      break;
    }
    try {
      adam_step(model, grads, adam, lr);
    } catch (const std::runtime_error&) {
      log.diverged = true;
      if (opts.log_fn) opts.log_fn("non-finite gradient at step " + std::to_string(step) + "; stopping");
      break;
    }
    loss_acc += objective;
    ++loss_n;
    log.steps_run = step + 1;

    const bool at_eval = (step + 1) % cfg.eval_every_steps == 0 || step + 1 == cfg.max_steps;
    if (!at_eval) continue;
    const double val_gap = eval_fn(model);
    log.evals.push_back({step + 1, lr, loss_n ? loss_acc / static_cast<double>(loss_n) : 0.0, val_gap});
    loss_acc = 0.0;
    loss_n = 0;
    if (opts.log_fn)
      opts.log_fn("step " + std::to_string(step + 1) + " lr " + std::to_string(lr) + " loss " +
                  std::to_string(log.evals.back().train_loss) + " val_gap " + std::to_string(val_gap));
    if (val_gap > best_gap) {
      best_gap = val_gap;
      result.params = model;
      log.best_step = step + 1;
      log.best_val_gap = val_gap;
      evals_since_best = 0;
    } else if (++evals_since_best >= cfg.patience) {
      if (opts.log_fn) opts.log_fn("early stop at step " + std::to_string(step + 1));
      break;
    }
  }
  if (log.best_step < 0) result.params = model;  // never evaluated (max_steps == 0)
  return result;
}

}  // namespace mlvc
