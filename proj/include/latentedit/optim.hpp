#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>

namespace latentedit {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First-order adaptive-moment optimiser over a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, Eigen::Index size)
      : m(Eigen::VectorXd::Zero(size)), v(Eigen::VectorXd::Zero(size)), cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  // Returns the updated parameters without mutating the optimiser; commit()
  // applies the moment update once the caller accepts the step.
  Eigen::VectorXd propose(const Eigen::VectorXd& params, const Eigen::VectorXd& grad, Eigen::VectorXd& m_next,
                          Eigen::VectorXd& v_next) const {
    m_next = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
    v_next = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
    const double t_next = static_cast<double>(steps + 1);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_next);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_next);
    return params.array() - cfg_.lr * (m_next.array() / bc1) / ((v_next.array() / bc2).sqrt() + cfg_.eps);
  }
  void commit(Eigen::VectorXd m_next, Eigen::VectorXd v_next) {
    m = std::move(m_next);
    v = std::move(v_next);
    ++steps;
  }

  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t steps = 0;

 private:
  AdamConfig cfg_;
};

}  // namespace latentedit
