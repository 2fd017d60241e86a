#pragma once

// Conversions between Tensor (row-major, rank 2) and Eigen dense matrices.

#include <Eigen/Dense>

#include "moedis/tensor.hpp"

namespace moedis {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  v.reserve(std::size_t(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  return Tensor({std::size_t(m.rows()), std::size_t(m.cols())}, std::move(v));
}

inline Tensor transpose_of(const Tensor& t) { return from_eigen(to_eigen(t).transpose()); }

}  // namespace moedis
