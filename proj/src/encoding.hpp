#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "error.hpp"

namespace inrc {

// Frequency matrix for random Fourier features. Entries are i.i.d.
// N(0, sigma^2); regeneration with the same (rows, dim, sigma, seed) is
// bit-identical.
struct RffMatrix {
  Eigen::MatrixXd B; // M x d
  double sigma = 10.0;
  std::uint64_t seed = 0;

  static RffMatrix make(int rows, int dim, double sigma, std::uint64_t seed);
};

// Input feature map: identity or gamma_B(v) = [cos(2 pi B v), sin(2 pi B v)].
class Encoding {
public:
  static Encoding identity(int dim);
  static Encoding rff(RffMatrix matrix);

  bool is_rff() const { return is_rff_; }
  int input_dim() const { return input_dim_; }
  int output_dim() const { return is_rff_ ? 2 * static_cast<int>(rff_.B.rows()) : input_dim_; }
  const RffMatrix& rff_matrix() const { return rff_; }

  Eigen::VectorXd encode(const Eigen::VectorXd& v) const;
  // columns are samples
  Eigen::MatrixXd encode_batch(const Eigen::MatrixXd& v) const;
  // d(gamma)/dv at v, output_dim x input_dim
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& v) const;

private:
  Encoding() = default;
  bool is_rff_ = false;
  int input_dim_ = 0;
  RffMatrix rff_;
};

} // namespace inrc
