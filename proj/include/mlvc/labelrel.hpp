#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlvc/types.hpp"

namespace mlvc {

// Label relation machinery: the output layer W (one column per label) is
// regularized by tr(W Omega^-1 W^T) where Omega is a symmetric PSD matrix
// with unit trace. For fixed W the optimal Omega has the closed form
// (W^T W)^{1/2} / tr((W^T W)^{1/2}), so training alternates gradient steps
// on W with that closed-form update.

struct RelationMatrix {
  Eigen::MatrixXd omega;
};

inline constexpr double kOmegaSymTol = 1e-10;
inline constexpr double kOmegaPsdTol = 1e-10;
inline constexpr double kOmegaTraceTol = 1e-10;
inline constexpr double kDefaultRidge = 1e-3;

inline Validation validate_relation_matrix(const Eigen::MatrixXd& omega) {
  if (omega.rows() != omega.cols() || omega.rows() == 0)
    return Validation::fail("relation matrix must be square and non-empty");
  const double asym = (omega - omega.transpose()).cwiseAbs().maxCoeff();
  if (asym > kOmegaSymTol)
    return Validation::fail("relation matrix asymmetric by " + std::to_string(asym));
  const double trace_err = std::abs(omega.trace() - 1.0);
  if (trace_err > kOmegaTraceTol)
    return Validation::fail("relation matrix trace off by " + std::to_string(trace_err));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(omega, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) return Validation::fail("eigendecomposition failed");
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -kOmegaPsdTol)
    return Validation::fail("relation matrix has eigenvalue " + std::to_string(min_eig));
  return Validation::pass();
}

// Symmetric PSD square root via eigendecomposition. Tiny negative
// eigenvalues from roundoff are clamped to zero; real negativity is an
// error, as is a meaningfully asymmetric input.
inline Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& s) {
  if (s.rows() != s.cols() || s.rows() == 0)
    throw std::invalid_argument("sym_sqrt: matrix must be square and non-empty");
  const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * scale)
    throw std::invalid_argument("sym_sqrt: input asymmetric by " + std::to_string(asym));
  const Eigen::MatrixXd sym = 0.5 * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw std::runtime_error("sym_sqrt: eigendecomposition failed");
  Eigen::VectorXd eigs = es.eigenvalues();
  const double tol = kOmegaPsdTol * std::max(1.0, eigs.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < eigs.size(); ++i) {
    if (eigs[i] < -tol)
      throw std::invalid_argument("sym_sqrt: input not PSD (eigenvalue " + std::to_string(eigs[i]) + ")");
    eigs[i] = std::sqrt(std::max(eigs[i], 0.0));
  }
  const Eigen::MatrixXd root =
      es.eigenvectors() * eigs.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (root + root.transpose());
}

// Closed-form minimizer of the trace term at fixed W (columns = labels):
// Omega = (W^T W)^{1/2} / tr((W^T W)^{1/2}).
inline RelationMatrix update_omega(const Eigen::MatrixXd& w) {
  if (w.cols() == 0) throw std::invalid_argument("update_omega: empty output layer");
  const Eigen::MatrixXd gram = w.transpose() * w;
  const Eigen::MatrixXd root = sym_sqrt(gram);
  const double tr = root.trace();
  if (!(tr > 1e-12))
    throw std::runtime_error("update_omega: degenerate output layer (trace " + std::to_string(tr) + ")");
  Eigen::MatrixXd omega = root / tr;
  omega = 0.5 * (omega + omega.transpose());
  // pin the trace exactly; eigen-reconstruction leaves ~1e-16 residue
  omega *= 1.0 / omega.trace();
  return RelationMatrix{std::move(omega)};
}

struct TraceReg {
  double value;
  Eigen::MatrixXd grad;  // dvalue/dW, same shape as W
};

// Ridge-blended regularizer tr(W Omega~^-1 W^T) with
// Omega~ = (1-ridge) Omega + (ridge/C) I, solved by Cholesky. The blend
// keeps the solve well-posed when Omega is singular (it is PSD, not PD).
inline TraceReg trace_reg(const Eigen::MatrixXd& w, const Eigen::MatrixXd& omega,
                          double ridge = kDefaultRidge) {
  const Eigen::Index c = omega.rows();
  if (omega.cols() != c || c == 0) throw std::invalid_argument("trace_reg: omega must be square");
  if (w.cols() != c) throw std::invalid_argument("trace_reg: W has " + std::to_string(w.cols()) +
                                                 " columns, omega is " + std::to_string(c) + "x" +
                                                 std::to_string(c));
  if (ridge < 0.0 || ridge >= 1.0) throw ConfigError("trace_reg: ridge must be in [0, 1)");
  const double asym = (omega - omega.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * std::max(1.0, omega.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("trace_reg: omega asymmetric");
  Eigen::MatrixXd blend = (1.0 - ridge) * omega;
  blend.diagonal().array() += ridge / static_cast<double>(c);
  Eigen::LLT<Eigen::MatrixXd> llt(blend);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("trace_reg: omega not positive definite after ridge blend");
  const Eigen::MatrixXd x = llt.solve(w.transpose());  // Omega~^-1 W^T, C x H
  TraceReg out;
  out.value = (w * x).trace();
  out.grad = 2.0 * x.transpose();
  return out;
}

inline void write_omega_csv(const Eigen::MatrixXd& omega, const std::vector<std::string>& names,
                            std::ostream& out) {
  const Eigen::Index c = omega.rows();
  if (static_cast<Eigen::Index>(names.size()) != c)
    throw std::invalid_argument("write_omega_csv: name count mismatch");
  out << "label";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < c; ++r) {
    out << names[r];
    for (Eigen::Index cc = 0; cc < c; ++cc) {
      std::snprintf(buf, sizeof(buf), "%.9f", omega(r, cc));
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace mlvc
