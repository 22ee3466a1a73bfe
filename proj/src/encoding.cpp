#include "encoding.hpp"

#include <cmath>

#include "rng.hpp"

namespace inrc {

namespace {
constexpr double kTwoPi = 2.0 * M_PI;

void check_dim(const Eigen::MatrixXd& v, int expected) {
  if (v.rows() != expected)
    fail(Errc::invalid_argument, "encoding: input has dimension " + std::to_string(v.rows()) +
                                     ", expected " + std::to_string(expected));
}
} // namespace

RffMatrix RffMatrix::make(int rows, int dim, double sigma, std::uint64_t seed) {
  if (rows < 1) fail(Errc::invalid_argument, "rff: mapping size must be >= 1");
  if (!(sigma > 0.0)) fail(Errc::invalid_argument, "rff: sigma must be positive");
  RffMatrix m;
  m.sigma = sigma;
  m.seed = seed;
  m.B.resize(rows, dim);
  Rng rng(mix_seed(seed, 0x524646)); // "RFF"
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < dim; ++j) m.B(i, j) = sigma * rng.normal();
  return m;
}

Encoding Encoding::identity(int dim) {
  Encoding e;
  e.is_rff_ = false;
  e.input_dim_ = dim;
  return e;
}

Encoding Encoding::rff(RffMatrix matrix) {
  Encoding e;
  e.is_rff_ = true;
  e.input_dim_ = static_cast<int>(matrix.B.cols());
  e.rff_ = std::move(matrix);
  return e;
}

Eigen::VectorXd Encoding::encode(const Eigen::VectorXd& v) const {
  return encode_batch(v).col(0);
}

Eigen::MatrixXd Encoding::encode_batch(const Eigen::MatrixXd& v) const {
  check_dim(v, input_dim_);
  if (!is_rff_) return v;
  const Eigen::Index m = rff_.B.rows();
  Eigen::MatrixXd phase = kTwoPi * (rff_.B * v);
  Eigen::MatrixXd out(2 * m, v.cols());
  out.topRows(m) = phase.array().cos();
  out.bottomRows(m) = phase.array().sin();
  return out;
}

Eigen::MatrixXd Encoding::jacobian(const Eigen::VectorXd& v) const {
  check_dim(v, input_dim_);
  if (!is_rff_) return Eigen::MatrixXd::Identity(input_dim_, input_dim_);
  const Eigen::Index m = rff_.B.rows();
  const Eigen::VectorXd phase = kTwoPi * (rff_.B * v);
  Eigen::MatrixXd jac(2 * m, input_dim_);
  // d cos(2pi B_k v)/dv = -2pi sin(2pi B_k v) B_k, and the sine rows mirror it
  jac.topRows(m) = (-kTwoPi * phase.array().sin()).matrix().asDiagonal() * rff_.B;
  jac.bottomRows(m) = (kTwoPi * phase.array().cos()).matrix().asDiagonal() * rff_.B;
  return jac;
}

} // namespace inrc
