#pragma once

#include <Eigen/Dense>

namespace s2m {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// A descriptor set stores one descriptor per row (N x n).
template <typename Scalar>
using DescriptorSet = Matrix<Scalar>;

using Index = Eigen::Index;

}  // namespace s2m
