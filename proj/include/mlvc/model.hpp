#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlvc/dataset.hpp"
#include "mlvc/rng.hpp"
#include "mlvc/types.hpp"

namespace mlvc {

// Three per-label scorers over dense features, all trained with exact
// analytic gradients:
//   logistic    p = sigmoid(W x + b)
//   gated_mlp   h = relu(W1 x + b1), then a context gate
//               g = sigmoid(Wg h + bg) (*) h, then p = sigmoid(W2 g + b2)
//   moe         per label, a softmax gate over E expert logits mixes E
//               sigmoid experts: p_c = sum_e softmax(a_c x)_e sigmoid(w_ce x + b_ce)
// Scores land strictly inside (0, 1).

enum class ModelType { logistic, gated_mlp, moe };

inline const char* model_type_name(ModelType t) {
  switch (t) {
    case ModelType::logistic: return "logistic";
    case ModelType::gated_mlp: return "gated_mlp";
    case ModelType::moe: return "moe";
  }
  return "?";
}

inline ModelType parse_model_type(const std::string& s) {
  if (s == "logistic") return ModelType::logistic;
  if (s == "gated_mlp") return ModelType::gated_mlp;
  if (s == "moe") return ModelType::moe;
  throw ConfigError("unknown model type '" + s + "'");
}

enum class LayerRole { hidden, gate, output };

inline const char* layer_role_name(LayerRole r) {
  switch (r) {
    case LayerRole::hidden: return "hidden";
    case LayerRole::gate: return "gate";
    case LayerRole::output: return "output";
  }
  return "?";
}

struct Layer {
  LayerRole role;
  Eigen::MatrixXd weights;  // rows = outputs, cols = inputs
  Eigen::VectorXd bias;     // may be empty (the moe gate carries none)
};

struct ModelParams {
  ModelType type = ModelType::logistic;
  int input_dim = 0;
  int hidden_dim = 0;   // gated_mlp only
  int num_labels = 0;
  int num_experts = 0;  // moe only
  std::vector<Layer> layers;
  std::string name;
  std::string provenance;
  std::optional<Eigen::MatrixXd> omega;  // label relation matrix, when trained with one
};

inline ModelParams make_model(ModelType type, int input_dim, int num_labels, int hidden_dim = 0,
                              int num_experts = 0) {
  if (input_dim < 1 || num_labels < 1) throw ConfigError("model dims must be positive");
  ModelParams m;
  m.type = type;
  m.input_dim = input_dim;
  m.num_labels = num_labels;
  switch (type) {
    case ModelType::logistic:
      m.layers.push_back({LayerRole::output, Eigen::MatrixXd::Zero(num_labels, input_dim),
                          Eigen::VectorXd::Zero(num_labels)});
      break;
    case ModelType::gated_mlp:
      if (hidden_dim < 1) throw ConfigError("gated_mlp needs hidden_dim >= 1");
      m.hidden_dim = hidden_dim;
      m.layers.push_back({LayerRole::hidden, Eigen::MatrixXd::Zero(hidden_dim, input_dim),
                          Eigen::VectorXd::Zero(hidden_dim)});
      m.layers.push_back({LayerRole::gate, Eigen::MatrixXd::Zero(hidden_dim, hidden_dim),
                          Eigen::VectorXd::Zero(hidden_dim)});
      m.layers.push_back({LayerRole::output, Eigen::MatrixXd::Zero(num_labels, hidden_dim),
                          Eigen::VectorXd::Zero(num_labels)});
      break;
    case ModelType::moe: {
      if (num_experts < 1) throw ConfigError("moe needs num_experts >= 1");
      m.num_experts = num_experts;
      const int rows = num_labels * num_experts;
      m.layers.push_back(
          {LayerRole::gate, Eigen::MatrixXd::Zero(rows, input_dim), Eigen::VectorXd()});
      m.layers.push_back({LayerRole::output, Eigen::MatrixXd::Zero(rows, input_dim),
                          Eigen::VectorXd::Zero(rows)});
      break;
    }
  }
  return m;
}

// Gaussian init scaled by fan-in; biases start at zero. Draw order is fixed:
// layers in order, weights row-major.
inline void init_params(ModelParams& m, Rng& rng) {
  for (Layer& layer : m.layers) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer.weights.cols()));
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c)
        layer.weights(r, c) = scale * rng.normal();
    layer.bias.setZero();
  }
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double ez = std::exp(z);
  return ez / (1.0 + ez);
}

inline Eigen::VectorXd sigmoid(const Eigen::VectorXd& z) {
  Eigen::VectorXd out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = sigmoid(z[i]);
  return out;
}

// y = sigmoid(W x + b) (*) x, elementwise
inline Eigen::VectorXd context_gate(const Eigen::VectorXd& x, const Eigen::MatrixXd& w,
                                    const Eigen::VectorXd& b) {
  if (w.cols() != x.size() || w.rows() != b.size() || w.rows() != x.size())
    throw std::invalid_argument("context_gate: shape mismatch");
  return sigmoid((w * x + b).eval()).cwiseProduct(x);
}

namespace detail {

struct ForwardTrace {
  // gated_mlp
  Eigen::VectorXd h;    // relu(z1)
  Eigen::VectorXd z1;
  Eigen::VectorXd g;    // sigmoid(zg)
  Eigen::VectorXd hg;   // g (*) h
  // moe
  Eigen::VectorXd gate_probs;  // CE, softmax per label block
  Eigen::VectorXd expert_sig;  // CE
  // shared
  Eigen::VectorXd scores;
};

inline void check_input(const ModelParams& m, const Eigen::VectorXd& x) {
  if (x.size() != m.input_dim)
    throw std::invalid_argument("model input length " + std::to_string(x.size()) + " != " +
                                std::to_string(m.input_dim));
}

inline ForwardTrace forward_trace(const ModelParams& m, const Eigen::VectorXd& x) {
  check_input(m, x);
  ForwardTrace t;
  switch (m.type) {
    case ModelType::logistic: {
      t.scores = sigmoid((m.layers[0].weights * x + m.layers[0].bias).eval());
      break;
    }
    case ModelType::gated_mlp: {
      t.z1 = m.layers[0].weights * x + m.layers[0].bias;
      t.h = t.z1.cwiseMax(0.0);
      t.g = sigmoid((m.layers[1].weights * t.h + m.layers[1].bias).eval());
      t.hg = t.g.cwiseProduct(t.h);
      t.scores = sigmoid((m.layers[2].weights * t.hg + m.layers[2].bias).eval());
      break;
    }
    case ModelType::moe: {
      const int e_cnt = m.num_experts;
      const Eigen::VectorXd u = m.layers[0].weights * x;
      t.expert_sig = sigmoid((m.layers[1].weights * x + m.layers[1].bias).eval());
      t.gate_probs.resize(u.size());
      t.scores.resize(m.num_labels);
      for (int c = 0; c < m.num_labels; ++c) {
        const int base = c * e_cnt;
        double mx = u[base];
        for (int e = 1; e < e_cnt; ++e) mx = std::max(mx, u[base + e]);
        double z = 0.0;
        for (int e = 0; e < e_cnt; ++e) {
          const double w = std::exp(u[base + e] - mx);
          t.gate_probs[base + e] = w;
          z += w;
        }
        double score = 0.0;
        for (int e = 0; e < e_cnt; ++e) {
          t.gate_probs[base + e] /= z;
          score += t.gate_probs[base + e] * t.expert_sig[base + e];
        }
        t.scores[c] = score;
      }
      break;
    }
  }
  return t;
}

}  // namespace detail

inline ScoreVector forward(const ModelParams& m, const Eigen::VectorXd& x) {
  const auto t = detail::forward_trace(m, x);
  return ScoreVector(t.scores.data(), t.scores.data() + t.scores.size());
}

inline ScoreVector forward(const ModelParams& m, const std::vector<double>& x) {
  return forward(m, Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())));
}

struct Gradients {
  struct LayerGrad {
    Eigen::MatrixXd weights;
    Eigen::VectorXd bias;
  };
  std::vector<LayerGrad> layers;
  Eigen::VectorXd input;
};

inline Gradients zero_gradients(const ModelParams& m) {
  Gradients g;
  g.layers.reserve(m.layers.size());
  for (const Layer& layer : m.layers)
    g.layers.push_back({Eigen::MatrixXd::Zero(layer.weights.rows(), layer.weights.cols()),
                        Eigen::VectorXd::Zero(layer.bias.size())});
  g.input = Eigen::VectorXd::Zero(m.input_dim);
  return g;
}

// Exact gradients of upstream . scores with respect to every parameter and
// the input. `upstream` is dL/dscores (length C).
inline void backward_into(const ModelParams& m, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& upstream, Gradients& out) {
  detail::check_input(m, x);
  if (upstream.size() != m.num_labels)
    throw std::invalid_argument("upstream gradient length mismatch");
  const auto t = detail::forward_trace(m, x);
  switch (m.type) {
    case ModelType::logistic: {
      const Eigen::VectorXd dz =
          upstream.cwiseProduct(t.scores.cwiseProduct((1.0 - t.scores.array()).matrix()));
      out.layers[0].weights.noalias() += dz * x.transpose();
      out.layers[0].bias += dz;
      out.input.noalias() += m.layers[0].weights.transpose() * dz;
      break;
    }
    case ModelType::gated_mlp: {
      const Eigen::VectorXd dz2 =
          upstream.cwiseProduct(t.scores.cwiseProduct((1.0 - t.scores.array()).matrix()));
      out.layers[2].weights.noalias() += dz2 * t.hg.transpose();
      out.layers[2].bias += dz2;
      const Eigen::VectorXd dhg = m.layers[2].weights.transpose() * dz2;
      const Eigen::VectorXd dzg =
          dhg.cwiseProduct(t.h).cwiseProduct(t.g).cwiseProduct((1.0 - t.g.array()).matrix());
      out.layers[1].weights.noalias() += dzg * t.h.transpose();
      out.layers[1].bias += dzg;
      Eigen::VectorXd dh = dhg.cwiseProduct(t.g);
      dh.noalias() += m.layers[1].weights.transpose() * dzg;
      const Eigen::VectorXd dz1 =
          (t.z1.array() > 0.0).select(dh, Eigen::VectorXd::Zero(dh.size()));
      out.layers[0].weights.noalias() += dz1 * x.transpose();
      out.layers[0].bias += dz1;
      out.input.noalias() += m.layers[0].weights.transpose() * dz1;
      break;
    }
    case ModelType::moe: {
      const int e_cnt = m.num_experts;
      Eigen::VectorXd du(t.gate_probs.size()), dzx(t.gate_probs.size());
      for (int c = 0; c < m.num_labels; ++c) {
        const int base = c * e_cnt;
        for (int e = 0; e < e_cnt; ++e) {
          const double gp = t.gate_probs[base + e];
          const double s = t.expert_sig[base + e];
          du[base + e] = upstream[c] * gp * (s - t.scores[c]);
          dzx[base + e] = upstream[c] * gp * s * (1.0 - s);
        }
      }
      out.layers[0].weights.noalias() += du * x.transpose();
      out.layers[1].weights.noalias() += dzx * x.transpose();
      out.layers[1].bias += dzx;
      out.input.noalias() += m.layers[0].weights.transpose() * du;
      out.input.noalias() += m.layers[1].weights.transpose() * dzx;
      break;
    }
  }
}

inline Gradients backward(const ModelParams& m, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& upstream) {
  Gradients g = zero_gradients(m);
  backward_into(m, x, upstream, g);
  return g;
}

inline std::int64_t param_count(const ModelParams& m) {
  std::int64_t n = 0;
  for (const Layer& l : m.layers) n += l.weights.size() + l.bias.size();
  return n;
}

inline std::int64_t param_size_bytes(const ModelParams& m, int bytes_per_param) {
  if (bytes_per_param != 4 && bytes_per_param != 8)
    throw ConfigError("bytes_per_param must be 4 or 8");
  return param_count(m) * bytes_per_param;
}

struct BudgetCheck {
  bool within;
  std::int64_t size_bytes;
  std::int64_t budget_bytes;
};

// Inclusive: a model exactly at the budget passes.
inline BudgetCheck check_budget(const ModelParams& m, std::int64_t budget_bytes,
                                int bytes_per_param) {
  const std::int64_t size = param_size_bytes(m, bytes_per_param);
  return {size <= budget_bytes, size, budget_bytes};
}

// The output layer viewed as one column per label, for the label-relation
// regularizer: logistic -> D x C, gated_mlp -> H x C, moe -> (E*D) x C with
// each label's experts stacked.
inline Eigen::MatrixXd output_label_matrix(const ModelParams& m) {
  switch (m.type) {
    case ModelType::logistic:
      return m.layers[0].weights.transpose();
    case ModelType::gated_mlp:
      return m.layers[2].weights.transpose();
    case ModelType::moe: {
      const int e_cnt = m.num_experts, d = m.input_dim;
      Eigen::MatrixXd w(e_cnt * d, m.num_labels);
      for (int c = 0; c < m.num_labels; ++c)
        for (int e = 0; e < e_cnt; ++e)
          w.block(e * d, c, d, 1) = m.layers[1].weights.row(c * e_cnt + e).transpose();
      return w;
    }
  }
  throw std::logic_error("unreachable");
}

inline void add_output_matrix_gradient(const ModelParams& m, const Eigen::MatrixXd& grad,
                                       Gradients& out) {
  switch (m.type) {
    case ModelType::logistic:
      out.layers[0].weights += grad.transpose();
      return;
    case ModelType::gated_mlp:
      out.layers[2].weights += grad.transpose();
      return;
    case ModelType::moe: {
      const int e_cnt = m.num_experts, d = m.input_dim;
      for (int c = 0; c < m.num_labels; ++c)
        for (int e = 0; e < e_cnt; ++e)
          out.layers[1].weights.row(c * e_cnt + e) += grad.block(e * d, c, d, 1).transpose();
      return;
    }
  }
}

// flat row-major parameter vector, used by optimizer state and tests
inline std::vector<double> flatten_params(const ModelParams& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(param_count(m)));
  for (const Layer& l : m.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) v.push_back(l.weights(r, c));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) v.push_back(l.bias[i]);
  }
  return v;
}

inline void unflatten_params(ModelParams& m, const std::vector<double>& v) {
  if (static_cast<std::int64_t>(v.size()) != param_count(m))
    throw std::invalid_argument("flat parameter length mismatch");
  std::size_t k = 0;
  for (Layer& l : m.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = v[k++];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = v[k++];
  }
}

inline nlohmann::ordered_json model_to_json(const ModelParams& m) {
  nlohmann::ordered_json j;
  j["model_type"] = model_type_name(m.type);
  j["input_dim"] = m.input_dim;
  j["hidden_dim"] = m.hidden_dim;
  j["num_labels"] = m.num_labels;
  j["num_experts"] = m.num_experts;
  j["name"] = m.name;
  j["provenance"] = m.provenance;
  j["layers"] = nlohmann::ordered_json::array();
  for (const Layer& l : m.layers) {
    nlohmann::ordered_json lj;
    lj["role"] = layer_role_name(l.role);
    lj["rows"] = l.weights.rows();
    lj["cols"] = l.weights.cols();
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weights.size()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
    lj["weights"] = w;
    lj["bias"] = std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size());
    j["layers"].push_back(std::move(lj));
  }
  if (m.omega) {
    std::vector<double> o;
    o.reserve(static_cast<std::size_t>(m.omega->size()));
    for (Eigen::Index r = 0; r < m.omega->rows(); ++r)
      for (Eigen::Index c = 0; c < m.omega->cols(); ++c) o.push_back((*m.omega)(r, c));
    j["omega"] = o;
  }
  return j;
}

inline ModelParams model_from_json(const nlohmann::json& j) {
  ModelParams m = make_model(parse_model_type(j.at("model_type").get<std::string>()),
                             j.at("input_dim").get<int>(), j.at("num_labels").get<int>(),
                             j.value("hidden_dim", 0), j.value("num_experts", 0));
  m.name = j.value("name", "");
  m.provenance = j.value("provenance", "");
  const auto& layers = j.at("layers");
  if (layers.size() != m.layers.size()) throw std::runtime_error("model json: wrong layer count");
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& lj = layers[i];
    Layer& l = m.layers[i];
    if (lj.at("role").get<std::string>() != layer_role_name(l.role) ||
        lj.at("rows").get<Eigen::Index>() != l.weights.rows() ||
        lj.at("cols").get<Eigen::Index>() != l.weights.cols())
      throw std::runtime_error("model json: layer " + std::to_string(i) + " shape mismatch");
    const auto w = lj.at("weights").get<std::vector<double>>();
    const auto b = lj.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != l.weights.size() ||
        static_cast<Eigen::Index>(b.size()) != l.bias.size())
      throw std::runtime_error("model json: layer " + std::to_string(i) + " payload size mismatch");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = w[k++];
    for (Eigen::Index bi = 0; bi < l.bias.size(); ++bi) l.bias[bi] = b[bi];
  }
  if (j.contains("omega")) {
    const auto o = j.at("omega").get<std::vector<double>>();
    const int c = m.num_labels;
    if (static_cast<int>(o.size()) != c * c) throw std::runtime_error("model json: omega size mismatch");
    Eigen::MatrixXd omega(c, c);
    std::size_t k = 0;
    for (int r = 0; r < c; ++r)
      for (int cc = 0; cc < c; ++cc) omega(r, cc) = o[k++];
    m.omega = std::move(omega);
  }
  return m;
}

inline void save_model(const ModelParams& m, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << model_to_json(m).dump(2) << '\n';
}

inline ModelParams load_model(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  try {
    return model_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& ex) {
    throw std::runtime_error(path.string() + ": bad model file: " + ex.what());
  }
}

inline PredictionSet predict_set(const ModelParams& m, const std::vector<Example>& examples,
                                 std::string name = "") {
  PredictionSet p;
  p.model_name = name.empty() ? m.name : std::move(name);
  p.ids.reserve(examples.size());
  p.scores.reserve(examples.size());
  for (const Example& e : examples) {
    p.ids.push_back(e.id);
    p.scores.push_back(forward(m, e.features));
  }
  return p;
}

}  // namespace mlvc
